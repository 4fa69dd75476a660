//! Comparison baselines: single-model beam search and probability-space
//! interpolation of models that share one vocabulary.

use crate::decoder::{rank_finished, Hypothesis};
use crate::error::{Error, Result};
use crate::model::{self, ln, ModelAdapter, ModelState, StepResult};
use crate::score::validate_weights;
use crate::vocab::{TokenId, Vocabulary};

/// Weighted mixture `p(x) = Σ λᵢ pᵢ(x)` of same-vocabulary models.
///
/// The mixture is itself a [`ModelAdapter`], so any single-model search can run on it.
pub struct InterpolationEnsemble<'m> {
    adapters: Vec<&'m dyn ModelAdapter>,
    weights: Vec<f64>,
    name: String,
}

impl<'m> InterpolationEnsemble<'m> {
    pub fn new(adapters: Vec<&'m dyn ModelAdapter>, weights: Vec<f64>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::config("interpolation needs at least one model"));
        }
        if adapters.len() != weights.len() {
            return Err(Error::config(format!(
                "{} weights for {} models",
                weights.len(),
                adapters.len()
            )));
        }
        validate_weights(&weights)?;
        let first = adapters[0].vocabulary();
        if let Some(other) = adapters[1..].iter().find(|a| a.vocabulary() != first) {
            return Err(Error::config(format!(
                "model `{}` does not share the vocabulary of `{}`",
                other.name(),
                adapters[0].name()
            )));
        }
        let name = adapters
            .iter()
            .map(|a| a.name())
            .collect::<Vec<_>>()
            .join("+");
        Ok(Self {
            adapters,
            weights,
            name,
        })
    }
}

impl ModelAdapter for InterpolationEnsemble<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocabulary(&self) -> &Vocabulary {
        self.adapters[0].vocabulary()
    }

    fn next_log_probs(&self, conditioning: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut mixed = vec![0.0; self.vocabulary().len()];
        for (adapter, &w) in self.adapters.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let lp = adapter.next_log_probs(conditioning, prefix)?;
            if lp.len() != mixed.len() {
                return Err(Error::adapter(
                    adapter.name(),
                    "distribution has the wrong size",
                ));
            }
            for (acc, l) in mixed.iter_mut().zip(lp) {
                *acc += w * l.exp();
            }
        }
        Ok(mixed.into_iter().map(ln).collect())
    }
}

/// One interpolated step from states that all share the same token sequence.
/// Cumulative scores continue from the first state's score.
pub fn interpolate_step(
    ensemble: &InterpolationEnsemble<'_>,
    conditioning: &str,
    states: &[ModelState],
) -> Result<StepResult> {
    if states.len() != ensemble.adapters.len() {
        return Err(Error::usage(format!(
            "{} states for {} models",
            states.len(),
            ensemble.adapters.len()
        )));
    }
    if states[1..]
        .iter()
        .any(|s| s.token_ids() != states[0].token_ids())
    {
        return Err(Error::usage("interpolation requires identical prefixes"));
    }
    model::step(ensemble, conditioning, &states[0])
}

/// Length-normalized beam search over one model.
///
/// Candidates from all live hypotheses are ranked by `cum_logprob / length`
/// (ties: beam position, then rank within the sorted step). Hypotheses ending
/// in EOS move to the finished pool; search stops when `beam_size` are
/// finished or no live hypothesis remains.
pub fn decode_single(
    model: &dyn ModelAdapter,
    conditioning: &str,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::config("beam size must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::config("max length must be at least 1"));
    }
    let vocab = model.vocabulary();
    let mut beam = vec![(ModelState::new(), 0.0f64)];
    let mut finished = Vec::new();

    while !beam.is_empty() && finished.len() < beam_size {
        struct Cand {
            score: f64,
            beam: usize,
            rank: usize,
            token: TokenId,
            total: f64,
        }
        let mut cands = Vec::new();
        for (b, (state, _)) in beam.iter().enumerate() {
            if state.len() >= max_len {
                continue;
            }
            let length = (state.len() + 1) as f64;
            let step = model::step(model, conditioning, state)?;
            for (rank, e) in step.entries.iter().enumerate() {
                if e.score == f64::NEG_INFINITY {
                    break;
                }
                cands.push(Cand {
                    score: e.score / length,
                    beam: b,
                    rank,
                    token: e.token,
                    total: e.score,
                });
            }
        }
        cands.sort_by(|x, y| {
            y.score
                .total_cmp(&x.score)
                .then(x.beam.cmp(&y.beam))
                .then(x.rank.cmp(&y.rank))
        });

        let mut next = Vec::with_capacity(beam_size);
        for c in cands {
            if next.len() >= beam_size || finished.len() >= beam_size {
                break;
            }
            let state = beam[c.beam].0.extend_to(vocab, c.token, c.total)?;
            if state.is_terminated() {
                finished.push(Hypothesis {
                    bytes: state.bytes().to_vec(),
                    tokens: vec![state.token_ids().to_vec()],
                    score: c.score,
                    fallback: false,
                });
            } else {
                next.push((state, c.score));
            }
        }
        beam = next;
    }
    Ok(rank_finished(finished, beam_size, 1))
}
