use std::time::{Duration, Instant};

use abe_core::decoder::{decode, EnsembleConfig, Hypothesis};
use abe_core::oracle::{enumerate_joint, OracleResult};
use abe_core::toy::{random_scenario, ToyParams};
use abe_core::{ModelAdapter, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SCORE_TOLERANCE: f64 = 1e-9;
const BEAMS: [usize; 3] = [1, 2, 5];

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub trial: usize,
    pub beam: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub trials: usize,
    pub matched: usize,
    /// Trials whose best decoded hypothesis is the oracle's best.
    pub top1: usize,
    /// Trials where every decoded hypothesis is a genuine joint hypothesis with the oracle's score.
    pub sound: usize,
    /// Trials where the beam died out although agreeing hypotheses exist.
    pub dead_ends: usize,
    pub mismatches: Vec<Mismatch>,
    pub elapsed: Duration,
}

fn describe(h: &Hypothesis) -> String {
    format!("{:?} {:.6}", String::from_utf8_lossy(&h.bytes), h.score)
}

/// Compares decode output with the oracle's top-k, allowing reordering among
/// hypotheses whose scores tie within the tolerance.
fn compare(
    decoded: &[Hypothesis],
    oracle: &OracleResult,
    k: usize,
) -> (bool, bool, Option<String>) {
    let genuine = |h: &Hypothesis| {
        oracle.ranked.iter().any(|e| {
            e.tokens == h.tokens
                && e.bytes == h.bytes
                && (e.score - h.score).abs() <= SCORE_TOLERANCE
        })
    };
    if oracle.total == 0 {
        let ok = decoded.len() == 1 && decoded[0].fallback;
        let why = (!ok).then(|| "oracle found nothing but decode returned hypotheses".to_string());
        return (ok, ok, why);
    }
    let sound = decoded.iter().all(|h| !h.fallback && genuine(h));
    let top1 = sound && (decoded[0].score - oracle.ranked[0].score).abs() <= SCORE_TOLERANCE;
    let want = &oracle.ranked[..k.min(oracle.total)];
    if decoded.len() != want.len() {
        return (
            false,
            top1,
            Some(format!(
                "decode returned {} hypotheses, oracle {}",
                decoded.len(),
                want.len()
            )),
        );
    }
    for (i, (h, e)) in decoded.iter().zip(want).enumerate() {
        if (h.score - e.score).abs() > SCORE_TOLERANCE {
            return (
                false,
                top1,
                Some(format!(
                    "rank {i}: decode {} vs oracle {:?} {:.6}",
                    describe(h),
                    String::from_utf8_lossy(&e.bytes),
                    e.score
                )),
            );
        }
    }
    if !sound {
        return (
            false,
            false,
            Some("decode returned a hypothesis the oracle does not know".into()),
        );
    }
    (true, true, None)
}

/// Runs `trials` random scenarios (2–3 models, vocabularies of 8–40 pieces,
/// beam 1, 2 or 5, max length 8, unbounded pops) through decode and the oracle.
pub fn run(trials: usize, seed: u64) -> Result<Report> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report {
        trials,
        ..Report::default()
    };
    for trial in 0..trials {
        let models = rng.gen_range(2..=3);
        let beam = BEAMS[rng.gen_range(0..BEAMS.len())];
        let scenario = random_scenario(
            &mut rng,
            &ToyParams {
                models,
                ..ToyParams::default()
            },
        )?;
        let adapters: Vec<&dyn ModelAdapter> = scenario
            .models
            .iter()
            .map(|m| m as &dyn ModelAdapter)
            .collect();
        let cond = vec![""; models];
        let config = EnsembleConfig::uniform(models)
            .with_beam(beam)
            .with_max_len(scenario.max_len)
            .with_pop_cap(usize::MAX);
        let decoded = decode(&adapters, &cond, &config)?;
        let oracle = enumerate_joint(
            &adapters,
            &cond,
            &config.weights,
            scenario.max_len,
            usize::MAX,
        )?;
        let (matched, top1, why) = compare(&decoded, &oracle, beam);
        report.matched += matched as usize;
        report.top1 += top1 as usize;
        report.sound += decoded.iter().filter(|h| !h.fallback).all(|h| {
            oracle
                .ranked
                .iter()
                .any(|e| e.tokens == h.tokens && (e.score - h.score).abs() <= SCORE_TOLERANCE)
        }) as usize;
        report.dead_ends += (decoded[0].fallback && oracle.total > 0) as usize;
        if let Some(reason) = why {
            report.mismatches.push(Mismatch {
                trial,
                beam,
                reason,
            });
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}
