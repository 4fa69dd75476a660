mod models;
mod oracle_check;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use abe_core::decoder::{decode, sample_decode, DecodeMode, EnsembleConfig, Hypothesis};
use abe_core::model::sequence_score;
use abe_core::remote::{serve_stdio, serve_tcp};
use abe_core::search::DEFAULT_POP_CAP;
use abe_core::{decode_single, Error, InterpolationEnsemble, ModelAdapter, ScenarioModel};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use models::{parse_weights, ModelSpec};

const EXIT_USAGE: u8 = 1;
const EXIT_MODEL: u8 = 2;
const EXIT_MISMATCH: u8 = 3;

#[derive(Parser)]
#[command(
    name = "abe",
    version,
    about = "Agreement-based ensemble decoding across models with different vocabularies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Beam search with a single model.
    Decode(DecodeArgs),
    /// Agreement-based ensemble of two or more models.
    Ensemble(DecodeArgs),
    /// Probability-space interpolation of models sharing one vocabulary.
    Interpolate(DecodeArgs),
    /// Ensemble ancestral sampling.
    Sample(DecodeArgs),
    /// Score candidate outputs under each model.
    Rank(RankArgs),
    /// Compare the decoder against brute-force enumeration on random scenarios.
    OracleCheck(OracleArgs),
    /// Serve a scenario model over the wire protocol.
    ServeToy(ServeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Beam,
    Greedy,
}

#[derive(Args)]
struct ModelArgs {
    /// Model source: scenario:PATH, remote:HOST:PORT or spawn:COMMAND. Repeatable.
    #[arg(long = "model", required = true)]
    models: Vec<ModelSpec>,
    /// Per-step response timeout for remote models, in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
}

#[derive(Args)]
struct IoArgs {
    /// Source segments, one per line (default: standard input).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file (default: standard output).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Comma-separated model weights, normalized to sum to one (default: uniform).
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = EnsembleConfig::DEFAULT_BEAM_SIZE)]
    beam: usize,
    /// Maximum tokens per model hypothesis, EOS included.
    #[arg(long, default_value_t = EnsembleConfig::DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Maximum heap pops per timestep.
    #[arg(long, default_value_t = DEFAULT_POP_CAP)]
    pop_cap: usize,
    #[arg(long, value_enum, default_value_t = Mode::Beam)]
    mode: Mode,
    /// Sampling seed; segment `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Conditioning text passed to every model.
    #[arg(long, default_value = "")]
    source: String,
    /// Score candidates as given, without the word-initial space.
    #[arg(long)]
    no_leading_space: bool,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Print every mismatch instead of the first few.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Scenario file to serve.
    scenario: PathBuf,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:0", conflicts_with = "stdio")]
    listen: String,
    /// Speak the protocol on standard input and output instead of TCP.
    #[arg(long)]
    stdio: bool,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
            _ => EXIT_MODEL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self {
            code: EXIT_MODEL,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_models(args: &ModelArgs) -> CliResult<Vec<Box<dyn ModelAdapter>>> {
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        return Err(Failure::usage("timeout must be positive"));
    }
    let timeout = Duration::from_secs_f64(args.timeout);
    args.models
        .iter()
        .map(|spec| {
            info!("loading {spec}");
            spec.load(timeout).map_err(|e| Failure {
                code: EXIT_MODEL,
                message: format!("{spec}: {e}"),
            })
        })
        .collect()
}

fn read_lines(input: &Option<PathBuf>) -> CliResult<Vec<String>> {
    let reader: Box<dyn BufRead> = match input {
        Some(path) => {
            Box::new(BufReader::new(File::open(path).map_err(|e| {
                Failure::usage(format!("{}: {e}", path.display()))
            })?))
        }
        None => Box::new(BufReader::new(io::stdin())),
    };
    reader
        .lines()
        .collect::<io::Result<Vec<_>>>()
        .map_err(|e| Failure::usage(format!("reading input: {e}")))
}

fn open_output(output: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match output {
        Some(path) => {
            Box::new(BufWriter::new(File::create(path).map_err(|e| {
                Failure::usage(format!("{}: {e}", path.display()))
            })?))
        }
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// Output text for a hypothesis: its bytes minus one word-initial space.
fn surface(h: &Hypothesis) -> &[u8] {
    h.bytes.strip_prefix(b" ").unwrap_or(&h.bytes)
}

fn build_config(args: &DecodeArgs, models: usize, mode: DecodeMode) -> CliResult<EnsembleConfig> {
    let weights = match &args.weights {
        Some(text) => parse_weights(text, models).map_err(Failure::usage)?,
        None => abe_core::score::uniform_weights(models),
    };
    let config = EnsembleConfig {
        weights,
        beam_size: args.beam,
        max_len: args.max_len,
        pop_cap: args.pop_cap,
        mode,
        rng_seed: args.seed,
    };
    config
        .validate()
        .map_err(|e| Failure::usage(e.to_string()))?;
    Ok(config)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Job {
    Single,
    Ensemble,
    Interpolate,
    Sample,
}

fn run_decode(job: Job, args: &DecodeArgs) -> CliResult {
    let n = args.models.models.len();
    match job {
        Job::Single if n != 1 => return Err(Failure::usage("decode takes exactly one --model")),
        Job::Interpolate if n < 2 => {
            return Err(Failure::usage(
                "interpolate needs at least two --model flags",
            ))
        }
        _ => {}
    }
    let mode = match (job, args.mode) {
        (Job::Sample, _) => DecodeMode::Sample,
        (_, Mode::Greedy) => DecodeMode::Greedy,
        (_, Mode::Beam) => DecodeMode::Beam,
    };
    let config = build_config(args, n, mode)?;
    let lines = read_lines(&args.io.input)?;
    let loaded = load_models(&args.models)?;
    let adapters: Vec<&dyn ModelAdapter> = loaded.iter().map(|m| m.as_ref()).collect();
    let beam = if mode == DecodeMode::Greedy {
        1
    } else {
        config.beam_size
    };

    let interpolation = match job {
        Job::Interpolate => Some(InterpolationEnsemble::new(
            adapters.clone(),
            config.weights.clone(),
        )?),
        _ => None,
    };

    let outputs: Vec<Vec<u8>> = lines
        .par_iter()
        .enumerate()
        .map(|(i, line)| -> abe_core::Result<Vec<u8>> {
            let best = match job {
                Job::Single => decode_single(adapters[0], line, beam, config.max_len)?.remove(0),
                Job::Interpolate => {
                    let ens = interpolation.as_ref().expect("built above");
                    decode_single(ens, line, beam, config.max_len)?.remove(0)
                }
                Job::Ensemble => {
                    let cond = vec![line.as_str(); n];
                    decode(&adapters, &cond, &config)?.remove(0)
                }
                Job::Sample => {
                    let cond = vec![line.as_str(); n];
                    let seeded = config
                        .clone()
                        .with_seed(config.rng_seed.wrapping_add(i as u64));
                    sample_decode(&adapters, &cond, &seeded)?
                }
            };
            if best.fallback {
                info!("segment {i}: no agreeing hypothesis, emitting empty output");
            }
            Ok(surface(&best).to_vec())
        })
        .collect::<abe_core::Result<_>>()?;

    let mut out = open_output(&args.io.output)?;
    for line in outputs {
        out.write_all(&line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn run_rank(args: &RankArgs) -> CliResult {
    let candidates = read_lines(&args.io.input)?;
    let loaded = load_models(&args.models)?;
    let mut out = open_output(&args.io.output)?;
    for model in &loaded {
        let vocab = model.vocabulary();
        let mut scores = Vec::with_capacity(candidates.len());
        for cand in &candidates {
            let text = if args.no_leading_space {
                cand.clone()
            } else {
                format!(" {cand}")
            };
            let mut ids = vocab.tokenize_greedy(text.as_bytes())?;
            ids.push(vocab.eos());
            scores.push(sequence_score(model.as_ref(), &args.source, &ids)?);
        }
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i.to_string())
            .unwrap_or_else(|| "-".into());
        write!(out, "{}\tbest={best}", model.name())?;
        for s in &scores {
            write!(out, "\t{s}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn run_oracle_check(args: &OracleArgs) -> CliResult {
    let report = oracle_check::run(args.trials, args.seed)?;
    println!(
        "oracle-check: {}/{} trials match (seed {}), top-1 {}/{}, sound {}/{}, dead ends {}, {:.2}s",
        report.matched,
        report.trials,
        args.seed,
        report.top1,
        report.trials,
        report.sound,
        report.trials,
        report.dead_ends,
        report.elapsed.as_secs_f64()
    );
    let shown = if args.verbose { usize::MAX } else { 5 };
    for m in report.mismatches.iter().take(shown) {
        println!("  trial {} (beam {}): {}", m.trial, m.beam, m.reason);
    }
    if report.mismatches.len() > shown {
        println!("  ... {} more", report.mismatches.len() - shown);
    }
    if report.matched == report.trials {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_MISMATCH,
            message: format!("{} mismatching trials", report.trials - report.matched),
        })
    }
}

fn run_serve(args: &ServeArgs) -> CliResult {
    let model = ScenarioModel::load(&args.scenario).map_err(|e| Failure {
        code: EXIT_MODEL,
        message: format!("{}: {e}", args.scenario.display()),
    })?;
    if args.stdio {
        serve_stdio(&model)?;
        return Ok(());
    }
    let listener = TcpListener::bind(&args.listen)
        .map_err(|e| Failure::usage(format!("cannot listen on {}: {e}", args.listen)))?;
    println!("listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    serve_tcp(Arc::new(model), listener)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ABE_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Decode(a) => run_decode(Job::Single, a),
        Command::Ensemble(a) => run_decode(Job::Ensemble, a),
        Command::Interpolate(a) => run_decode(Job::Interpolate, a),
        Command::Sample(a) => run_decode(Job::Sample, a),
        Command::Rank(a) => run_rank(a),
        Command::OracleCheck(a) => run_oracle_check(a),
        Command::ServeToy(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("abe: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
