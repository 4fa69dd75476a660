//! The agreement-based ensemble decoder.
//!
//! Every timestep, each live beam item computes which of its models are
//! stalled (already at the global hypothesis while another model trails),
//! builds one grid slot per model (a full sorted step, or the single epsilon
//! transition for a stalled or terminated model) and hands the grid to the
//! frontier search. Agreeing cells become the next beam; completed cells are
//! retired into the finished pool and replaced by the next agreeing cells.

use std::collections::HashSet;

use log::{debug, log_enabled, warn, Level};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agreement::{agrees, global_hypothesis, GlobalHypothesis, HypothesisString};
use crate::error::{Error, Result};
use crate::model::{self, ModelAdapter, ModelState, StepResult};
use crate::score::{combined_score_unchecked, uniform_weights, validate_weights, ModelScore};
use crate::search::{Candidate, Frontier, Grid, GridSlot, SearchStop, DEFAULT_POP_CAP};
use crate::vocab::{TokenId, EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    Greedy,
    #[default]
    Beam,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub weights: Vec<f64>,
    pub beam_size: usize,
    /// Per-model bound on local hypothesis length, EOS included.
    pub max_len: usize,
    pub pop_cap: usize,
    pub mode: DecodeMode,
    pub rng_seed: u64,
}

impl EnsembleConfig {
    pub const DEFAULT_BEAM_SIZE: usize = 5;
    pub const DEFAULT_MAX_LEN: usize = 256;

    /// Evenly weighted models, beam 5, 256 tokens.
    pub fn uniform(models: usize) -> Self {
        Self {
            weights: uniform_weights(models.max(1)),
            beam_size: Self::DEFAULT_BEAM_SIZE,
            max_len: Self::DEFAULT_MAX_LEN,
            pop_cap: DEFAULT_POP_CAP,
            mode: DecodeMode::Beam,
            rng_seed: 0,
        }
    }

    pub fn with_beam(mut self, beam_size: usize) -> Self {
        self.beam_size = beam_size;
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn with_mode(mut self, mode: DecodeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_pop_cap(mut self, pop_cap: usize) -> Self {
        self.pop_cap = pop_cap;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_weights(&self.weights)?;
        if self.beam_size == 0 {
            return Err(Error::config("beam size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max length must be at least 1"));
        }
        if self.pop_cap == 0 {
            return Err(Error::config("pop cap must be at least 1"));
        }
        Ok(())
    }

    fn effective_beam(&self) -> usize {
        match self.mode {
            DecodeMode::Greedy => 1,
            _ => self.beam_size,
        }
    }
}

/// One joint hypothesis: a local state per model plus its combined score.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamItem {
    pub states: Vec<ModelState>,
    pub score: f64,
}

impl BeamItem {
    pub fn initial(models: usize) -> Self {
        Self {
            states: vec![ModelState::new(); models],
            score: 0.0,
        }
    }

    fn hypotheses(&self) -> Vec<HypothesisString<'_>> {
        self.states.iter().map(ModelState::as_hypothesis).collect()
    }

    pub fn global(&self) -> GlobalHypothesis<'_> {
        global_hypothesis(&self.hypotheses()).expect("beam items hold at least one model")
    }

    pub fn agrees(&self) -> bool {
        agrees(&self.hypotheses())
    }

    /// Every model terminated on the same string.
    pub fn is_complete(&self) -> bool {
        self.states.iter().all(ModelState::is_terminated) && self.agrees()
    }

    fn token_key(&self) -> Vec<Vec<TokenId>> {
        self.states.iter().map(|s| s.token_ids().to_vec()).collect()
    }

    fn into_hypothesis(self) -> Hypothesis {
        let bytes = self.global().bytes.to_vec();
        Hypothesis {
            bytes,
            tokens: self.token_key(),
            score: self.score,
            fallback: false,
        }
    }
}

/// Marks model `i` stalled iff its string equals `g` while some other string differs.
/// Terminated models are always stalled.
pub fn update_stall_flags(item: &mut BeamItem) {
    let g = item.global().bytes.to_vec();
    let someone_behind = item.states.iter().any(|s| s.bytes() != g.as_slice());
    for s in &mut item.states {
        s.stalled = s.is_terminated() || (someone_behind && s.bytes() == g.as_slice());
    }
}

/// A decoded output with the tokenization each model used.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub bytes: Vec<u8>,
    pub tokens: Vec<Vec<TokenId>>,
    pub score: f64,
    /// The empty string returned when no agreed hypothesis was reached.
    pub fallback: bool,
}

impl Hypothesis {
    pub fn empty_fallback(models: usize) -> Self {
        Self {
            bytes: Vec::new(),
            tokens: vec![Vec::new(); models],
            score: f64::NEG_INFINITY,
            fallback: true,
        }
    }
}

/// Hooks into the decoding loop, used for instrumentation and visualisation.
pub trait DecodeObserver {
    /// Called before the search of timestep `t`, once stall flags are set.
    fn on_grid(&mut self, _t: usize, _beam: &[BeamItem], _grid: &Grid) {}
    /// Scores of every cell popped during timestep `t`, in pop order.
    fn on_search(&mut self, _t: usize, _popped: &[f64], _stop: SearchStop) {}
    /// The beam produced by timestep `t`.
    fn on_step(&mut self, _t: usize, _beam: &[BeamItem]) {}
}

impl DecodeObserver for () {}

/// Counts invariant violations across any number of decodes.
#[derive(Debug, Default, Clone)]
pub struct InvariantAudit {
    pub steps: usize,
    pub items_checked: usize,
    pub agreement_violations: usize,
    pub searches: usize,
    pub pop_order_violations: usize,
    pub length_violations: usize,
    pub stall_violations: usize,
    previous: Vec<BeamItem>,
}

impl InvariantAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn violations(&self) -> usize {
        self.agreement_violations
            + self.pop_order_violations
            + self.length_violations
            + self.stall_violations
    }
}

impl DecodeObserver for InvariantAudit {
    fn on_grid(&mut self, _t: usize, beam: &[BeamItem], _grid: &Grid) {
        self.previous = beam.to_vec();
    }

    fn on_search(&mut self, _t: usize, popped: &[f64], _stop: SearchStop) {
        self.searches += 1;
        if !crate::search::is_non_increasing(popped) {
            self.pop_order_violations += 1;
        }
    }

    fn on_step(&mut self, _t: usize, beam: &[BeamItem]) {
        self.steps += 1;
        for item in beam {
            self.items_checked += 1;
            if !item.agrees() {
                self.agreement_violations += 1;
            }
            // Each successor extends some parent by zero or one token per model,
            // and a stalled parent model keeps its state.
            let parent = self.previous.iter().find(|p| {
                p.states.iter().zip(&item.states).all(|(a, b)| {
                    let grew = b.len() == a.len() + 1 && b.token_ids().starts_with(a.token_ids());
                    let kept = b.token_ids() == a.token_ids() && b.cum_logprob() == a.cum_logprob();
                    if a.stalled {
                        kept
                    } else {
                        grew
                    }
                })
            });
            if parent.is_none() {
                let structural = self.previous.iter().any(|p| {
                    p.states.iter().zip(&item.states).all(|(a, b)| {
                        b.token_ids().starts_with(a.token_ids()) && b.len() <= a.len() + 1
                    })
                });
                if structural {
                    self.stall_violations += 1;
                } else {
                    self.length_violations += 1;
                }
            }
        }
    }
}

fn check_inputs(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    config: &EnsembleConfig,
) -> Result<()> {
    if models.is_empty() {
        return Err(Error::usage("at least one model is required"));
    }
    if conditioning.len() != models.len() {
        return Err(Error::usage(format!(
            "{} conditioning inputs for {} models",
            conditioning.len(),
            models.len()
        )));
    }
    config.validate()?;
    if config.weights.len() != models.len() {
        return Err(Error::config(format!(
            "{} weights for {} models",
            config.weights.len(),
            models.len()
        )));
    }
    Ok(())
}

/// Extends `item` by the tokens the grid cell `c` selects; `None` if the result disagrees.
fn materialize(
    models: &[&dyn ModelAdapter],
    item: &BeamItem,
    slots: &[GridSlot],
    c: &Candidate,
) -> Result<Option<BeamItem>> {
    let mut states = Vec::with_capacity(item.states.len());
    for (m, (state, slot)) in item.states.iter().zip(slots).enumerate() {
        let entry = slot.step.entries[c.ranks[m]];
        if entry.token == EPSILON {
            states.push(state.clone());
        } else {
            states.push(state.extend_to(models[m].vocabulary(), entry.token, entry.score)?);
        }
    }
    let next = BeamItem {
        states,
        score: c.score,
    };
    Ok(next.agrees().then_some(next))
}

fn build_grid(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    weights: &[f64],
    max_len: usize,
    beam: &[BeamItem],
) -> Result<Grid> {
    let mut items = Vec::with_capacity(beam.len());
    for item in beam {
        let mut slots = Vec::with_capacity(models.len());
        for (m, state) in item.states.iter().enumerate() {
            let slot = if state.stalled {
                GridSlot {
                    step: model::stalled_distribution(state)?,
                    length: state.len(),
                }
            } else if state.len() >= max_len {
                GridSlot {
                    step: StepResult::default(),
                    length: state.len(),
                }
            } else {
                GridSlot {
                    step: model::step(models[m], conditioning[m], state)?,
                    length: state.len() + 1,
                }
            };
            slots.push(slot);
        }
        items.push(slots);
    }
    Grid::new(weights.to_vec(), items)
}

/// Ensemble decode with beam search (or greedy search when `config.mode` is greedy).
pub fn decode(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    config: &EnsembleConfig,
) -> Result<Vec<Hypothesis>> {
    decode_observed(models, conditioning, config, &mut ())
}

pub fn decode_observed(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    config: &EnsembleConfig,
    observer: &mut dyn DecodeObserver,
) -> Result<Vec<Hypothesis>> {
    check_inputs(models, conditioning, config)?;
    if config.mode == DecodeMode::Sample {
        return sample_decode(models, conditioning, config).map(|h| vec![h]);
    }
    let k = config.effective_beam();
    let audit = log_enabled!(Level::Debug);

    let mut beam = vec![BeamItem::initial(models.len())];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut t = 0;

    while !beam.is_empty() && finished.len() < k {
        for item in &mut beam {
            update_stall_flags(item);
        }
        let grid = build_grid(models, conditioning, &config.weights, config.max_len, &beam)?;
        observer.on_grid(t, &beam, &grid);

        let mut frontier = Frontier::new();
        frontier.seed(&grid)?;
        let mut next_beam: Vec<BeamItem> = Vec::with_capacity(k);
        let mut seen: HashSet<Vec<Vec<TokenId>>> = HashSet::new();
        let mut failure = None;
        let mut stop = SearchStop::Satisfied;

        while next_beam.len() < k && finished.len() < k {
            let mut accepted = None;
            let popped = frontier.pop_agreeing(&grid, config.pop_cap, |c| {
                match materialize(models, &beam[c.beam], &grid.items[c.beam], c) {
                    Ok(Some(item)) if seen.insert(item.token_key()) => {
                        accepted = Some(item);
                        true
                    }
                    Ok(_) => false,
                    Err(e) => {
                        failure = Some(e);
                        true
                    }
                }
            });
            if let Some(e) = failure.take() {
                return Err(e);
            }
            match popped {
                Ok(_) => {
                    let item = accepted.take().expect("accepted cell was materialized");
                    if item.is_complete() {
                        finished.push(item.into_hypothesis());
                    } else {
                        next_beam.push(item);
                    }
                }
                Err(s) => {
                    stop = s;
                    break;
                }
            }
        }

        observer.on_search(t, frontier.popped_scores(), stop);
        if stop == SearchStop::PopCapReached && next_beam.is_empty() {
            warn!(
                "step {t}: pop cap of {} reached without an agreeing candidate",
                config.pop_cap
            );
        }
        if audit {
            for (i, item) in next_beam.iter().enumerate() {
                if !item.agrees() {
                    return Err(Error::InvariantViolation(format!(
                        "beam item {i} disagrees after step {t}"
                    )));
                }
            }
            debug!(
                "step {t}: {} pops, {} live, {} finished",
                frontier.pops(),
                next_beam.len(),
                finished.len()
            );
        }
        beam = next_beam;
        observer.on_step(t, &beam);
        t += 1;
    }

    Ok(rank_finished(finished, k, models.len()))
}

pub(crate) fn rank_finished(
    mut finished: Vec<Hypothesis>,
    k: usize,
    models: usize,
) -> Vec<Hypothesis> {
    if finished.is_empty() {
        return vec![Hypothesis::empty_fallback(models)];
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    finished.truncate(k);
    finished
}

/// Restricts `probs` to the entries where `mask` holds and rescales them to sum to one.
/// Returns `None` when the allowed mass is zero.
pub fn renormalize_agreeing(probs: &[f64], mask: &[bool]) -> Option<Vec<f64>> {
    let mass: f64 = probs
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(p, _)| *p)
        .sum();
    if mass.is_nan() || mass <= 0.0 {
        return None;
    }
    Some(
        probs
            .iter()
            .zip(mask)
            .map(|(p, &keep)| if keep { p / mass } else { 0.0 })
            .collect(),
    )
}

fn item_score(weights: &[f64], states: &[ModelState]) -> f64 {
    combined_score_unchecked(
        weights,
        states.iter().map(|s| ModelScore {
            cum_logprob: s.cum_logprob(),
            length: s.len(),
        }),
    )
}

/// Ancestral sampling: each timestep, every unstalled model in turn samples from
/// its distribution restricted to tokens that keep the set in agreement.
pub fn sample_decode(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    config: &EnsembleConfig,
) -> Result<Hypothesis> {
    check_inputs(models, conditioning, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut item = BeamItem::initial(models.len());

    loop {
        if item.is_complete() {
            item.score = item_score(&config.weights, &item.states);
            return Ok(item.into_hypothesis());
        }
        update_stall_flags(&mut item);
        let stalled: Vec<bool> = item.states.iter().map(|s| s.stalled).collect();
        for m in 0..models.len() {
            if stalled[m] {
                continue;
            }
            let state = &item.states[m];
            if state.len() >= config.max_len {
                return Ok(Hypothesis::empty_fallback(models.len()));
            }
            let vocab = models[m].vocabulary();
            let lp = models[m].next_log_probs(conditioning[m], state.token_ids())?;
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let mut extended = Vec::with_capacity(probs.len());
            let mut mask = Vec::with_capacity(probs.len());
            for (id, &l) in lp.iter().enumerate() {
                let next = if l == f64::NEG_INFINITY {
                    None
                } else {
                    let next = state.extend(vocab, id as TokenId, l)?;
                    let set: Vec<_> = item
                        .states
                        .iter()
                        .enumerate()
                        .map(|(j, s)| {
                            if j == m {
                                next.as_hypothesis()
                            } else {
                                s.as_hypothesis()
                            }
                        })
                        .collect();
                    agrees(&set).then_some(next)
                };
                mask.push(next.is_some());
                extended.push(next);
            }
            let Some(dist) = renormalize_agreeing(&probs, &mask) else {
                debug!("model {m} has no agreeing support");
                return Ok(Hypothesis::empty_fallback(models.len()));
            };
            let choice = sample_index(&mut rng, &dist);
            item.states[m] = extended[choice].take().expect("sampled an agreeing token");
        }
    }
}

fn sample_index(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScenarioModel;
    use crate::vocab::{Marker, VocabBuilder, Vocabulary};

    fn vocab(pieces: &[&str]) -> Vocabulary {
        VocabBuilder::new(Marker::sentencepiece())
            .eos("</s>")
            .normal(pieces.iter().copied())
            .build()
            .unwrap()
    }

    /// Deterministic model emitting `pieces` then EOS.
    fn chain(name: &str, v: &Vocabulary, pieces: &[&str]) -> ScenarioModel {
        let ids: Vec<TokenId> = pieces.iter().map(|p| v.id_of(p).unwrap()).collect();
        let rows = (0..=ids.len())
            .map(|t| {
                let next = ids.get(t).copied().unwrap_or(v.eos());
                (ids[..t].to_vec(), vec![(next, 1.0)])
            })
            .collect();
        ScenarioModel::from_probs(name, v.clone(), rows, vec![]).unwrap()
    }

    fn state(v: &Vocabulary, pieces: &[&str]) -> ModelState {
        let ids = pieces.iter().map(|p| v.id_of(p).unwrap()).collect();
        ModelState::from_tokens(v, ids, -1.0).unwrap()
    }

    #[test]
    fn leading_model_stalls() {
        let coarse = vocab(&["▁Primary", "▁school"]);
        let fine = vocab(&["▁Primary", "▁sch", "ool"]);
        let mut item = BeamItem {
            states: vec![
                state(&fine, &["▁Primary", "▁sch"]),
                state(&coarse, &["▁Primary", "▁school"]),
            ],
            score: 0.0,
        };
        update_stall_flags(&mut item);
        assert!(!item.states[0].stalled);
        assert!(item.states[1].stalled);
    }

    #[test]
    fn equal_strings_never_stall() {
        let v = vocab(&["▁a"]);
        let mut item = BeamItem {
            states: vec![state(&v, &["▁a"]), state(&v, &["▁a"])],
            score: 0.0,
        };
        update_stall_flags(&mut item);
        assert!(item.states.iter().all(|s| !s.stalled));
    }

    #[test]
    fn stall_flags_apply_pointwise() {
        let v = vocab(&["▁a", "b"]);
        let mut item = BeamItem {
            states: vec![
                state(&v, &["▁a", "b"]),
                state(&v, &["▁a"]),
                state(&v, &["▁a", "b"]),
            ],
            score: 0.0,
        };
        update_stall_flags(&mut item);
        let flags: Vec<_> = item.states.iter().map(|s| s.stalled).collect();
        assert_eq!(flags, vec![true, false, true]);
    }

    #[test]
    fn deterministic_models_agree_on_their_string() {
        let v1 = vocab(&["▁a", "b", "▁ab"]);
        let v2 = vocab(&["▁", "a", "b"]);
        let m1 = chain("m1", &v1, &["▁ab"]);
        let m2 = chain("m2", &v2, &["▁", "a", "b"]);
        let config = EnsembleConfig::uniform(2).with_beam(1);
        let out = decode(&[&m1, &m2], &["", ""], &config).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bytes, b" ab");
        assert!(!out[0].fallback);
        assert_eq!(out[0].score, 0.0);
    }

    #[test]
    fn disjoint_supports_fall_back_to_empty() {
        let v = vocab(&["▁a", "▁b"]);
        let always = |name: &str, piece: &str| {
            let id = v.id_of(piece).unwrap();
            ScenarioModel::from_probs(name, v.clone(), vec![], vec![(id, 1.0)]).unwrap()
        };
        let m1 = always("a", "▁a");
        let m2 = always("b", "▁b");
        let config = EnsembleConfig::uniform(2).with_max_len(4);
        let out = decode(&[&m1, &m2], &["", ""], &config).unwrap();
        assert_eq!(out, vec![Hypothesis::empty_fallback(2)]);
    }

    #[test]
    fn config_validation() {
        let v = vocab(&["▁a"]);
        let m = chain("m", &v, &["▁a"]);
        let bad = EnsembleConfig::uniform(1).with_beam(0);
        assert!(decode(&[&m], &[""], &bad).is_err());
        let mismatch = EnsembleConfig::uniform(2);
        assert!(decode(&[&m], &[""], &mismatch).is_err());
        assert!(decode(&[&m], &["", ""], &EnsembleConfig::uniform(1)).is_err());
        assert!(decode(&[], &[], &EnsembleConfig::uniform(1)).is_err());
    }

    #[test]
    fn renormalization() {
        let probs = [0.3, 0.2, 0.5];
        let out = renormalize_agreeing(&probs, &[true, true, false]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-9);
        assert!((out[1] - 0.4).abs() < 1e-9);
        assert_eq!(out[2], 0.0);
        assert!(renormalize_agreeing(&probs, &[false; 3]).is_none());
    }

    #[test]
    fn sampling_one_hot_matches_greedy() {
        let v1 = vocab(&["▁a", "b", "▁ab"]);
        let v2 = vocab(&["▁", "a", "b"]);
        let m1 = chain("m1", &v1, &["▁a", "b"]);
        let m2 = chain("m2", &v2, &["▁", "a", "b"]);
        let config = EnsembleConfig::uniform(2).with_mode(DecodeMode::Greedy);
        let greedy = decode(&[&m1, &m2], &["", ""], &config).unwrap();
        let sampled = sample_decode(
            &[&m1, &m2],
            &["", ""],
            &config.with_mode(DecodeMode::Sample),
        )
        .unwrap();
        assert_eq!(sampled.bytes, greedy[0].bytes);
        assert_eq!(sampled.tokens, greedy[0].tokens);
    }
}
