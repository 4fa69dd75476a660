//! Model adapters, per-model decoding state and sorted step distributions.
//!
//! Every score handled by the engine is a natural-log probability. A step
//! result holds cumulative scores (`cum_logprob + log p(token)`) over the whole
//! vocabulary, sorted descending with ties broken by ascending token id.

mod ngram;
mod scenario;

pub use ngram::NgramModel;
pub use scenario::{ScenarioFile, ScenarioModel, ScenarioRow};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary, EPSILON};

/// Anything that can produce a next-token distribution over its own vocabulary.
///
/// `conditioning` is opaque per-model input (source sentence, prompt, language
/// tags). Implementations must be callable concurrently from several threads.
pub trait ModelAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn vocabulary(&self) -> &Vocabulary;

    /// Log-probability of every vocabulary id following `prefix`, indexed by id.
    fn next_log_probs(&self, conditioning: &str, prefix: &[TokenId]) -> Result<Vec<f64>>;

    /// Sum of the step log-probabilities of `ids`.
    fn sequence_score(&self, conditioning: &str, ids: &[TokenId]) -> Result<f64> {
        let mut total = 0.0;
        for t in 0..ids.len() {
            let lp = self.next_log_probs(conditioning, &ids[..t])?;
            total += usize::try_from(ids[t])
                .ok()
                .and_then(|i| lp.get(i).copied())
                .ok_or(Error::InvalidToken {
                    id: ids[t],
                    size: lp.len(),
                })?;
        }
        Ok(total)
    }
}

impl<T: ModelAdapter + ?Sized> ModelAdapter for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn next_log_probs(&self, conditioning: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_log_probs(conditioning, prefix)
    }
    fn sequence_score(&self, conditioning: &str, ids: &[TokenId]) -> Result<f64> {
        (**self).sequence_score(conditioning, ids)
    }
}

impl<T: ModelAdapter + ?Sized> ModelAdapter for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn next_log_probs(&self, conditioning: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_log_probs(conditioning, prefix)
    }
    fn sequence_score(&self, conditioning: &str, ids: &[TokenId]) -> Result<f64> {
        (**self).sequence_score(conditioning, ids)
    }
}

/// One model's local hypothesis.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelState {
    token_ids: Vec<TokenId>,
    cum_logprob: f64,
    bytes: Vec<u8>,
    terminated: bool,
    pub stalled: bool,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a state from a token sequence and its cumulative score.
    pub fn from_tokens(
        vocab: &Vocabulary,
        token_ids: Vec<TokenId>,
        cum_logprob: f64,
    ) -> Result<Self> {
        let bytes = vocab.detokenize(&token_ids)?;
        let eos = vocab.eos();
        if let Some(pos) = token_ids.iter().position(|&t| t == eos) {
            if pos + 1 != token_ids.len() {
                return Err(Error::usage("EOS may only appear as the last token"));
            }
        }
        let terminated = token_ids.last() == Some(&eos);
        Ok(Self {
            token_ids,
            cum_logprob,
            bytes,
            terminated,
            stalled: false,
        })
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn cum_logprob(&self) -> f64 {
        self.cum_logprob
    }

    /// Detokenized local hypothesis.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn as_hypothesis(&self) -> crate::agreement::HypothesisString<'_> {
        crate::agreement::HypothesisString {
            bytes: &self.bytes,
            terminated: self.terminated,
        }
    }

    /// Returns a new state with `token` appended.
    pub fn extend(&self, vocab: &Vocabulary, token: TokenId, logprob: f64) -> Result<ModelState> {
        self.extend_to(vocab, token, self.cum_logprob + logprob)
    }

    /// Like [`ModelState::extend`], with the new cumulative score given directly.
    pub fn extend_to(
        &self,
        vocab: &Vocabulary,
        token: TokenId,
        cum_logprob: f64,
    ) -> Result<ModelState> {
        if self.terminated {
            return Err(Error::usage("cannot extend a terminated hypothesis"));
        }
        if token == EPSILON {
            return Err(Error::usage("EPSILON is not an extension"));
        }
        let piece = vocab.piece(token)?;
        let mut token_ids = Vec::with_capacity(self.token_ids.len() + 1);
        token_ids.extend_from_slice(&self.token_ids);
        token_ids.push(token);
        let mut bytes = Vec::with_capacity(self.bytes.len() + piece.bytes().len());
        bytes.extend_from_slice(&self.bytes);
        bytes.extend_from_slice(piece.bytes());
        Ok(ModelState {
            token_ids,
            cum_logprob,
            bytes,
            terminated: token == vocab.eos(),
            stalled: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEntry {
    pub token: TokenId,
    /// Cumulative score of the local hypothesis extended by `token`.
    pub score: f64,
}

/// A model's sorted candidate extensions for one timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepResult {
    pub entries: Vec<StepEntry>,
}

impl StepResult {
    /// Sorts `(token, score)` pairs descending by score, ties by ascending id.
    pub fn sorted(mut entries: Vec<StepEntry>) -> Self {
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.token.cmp(&b.token))
        });
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_epsilon(&self) -> bool {
        matches!(self.entries.as_slice(), [e] if e.token == EPSILON)
    }
}

fn validate_log_probs(adapter: &dyn ModelAdapter, lp: &[f64]) -> Result<()> {
    let size = adapter.vocabulary().len();
    if lp.len() != size {
        return Err(Error::adapter(
            adapter.name(),
            format!(
                "returned {} log-probabilities for a vocabulary of {size}",
                lp.len()
            ),
        ));
    }
    if let Some(bad) = lp.iter().find(|x| x.is_nan() || **x > 0.0) {
        return Err(Error::adapter(
            adapter.name(),
            format!("invalid log-probability {bad}"),
        ));
    }
    Ok(())
}

/// Runs one forward step from `state`, producing cumulative scores over the full vocabulary.
pub fn step(
    adapter: &dyn ModelAdapter,
    conditioning: &str,
    state: &ModelState,
) -> Result<StepResult> {
    if state.terminated {
        return Err(Error::usage("cannot step a terminated hypothesis"));
    }
    let lp = adapter.next_log_probs(conditioning, &state.token_ids)?;
    validate_log_probs(adapter, &lp)?;
    let base = state.cum_logprob;
    Ok(StepResult::sorted(
        lp.into_iter()
            .enumerate()
            .map(|(id, l)| StepEntry {
                token: id as TokenId,
                score: base + l,
            })
            .collect(),
    ))
}

/// The single epsilon transition of a stalled model; its score is unaltered.
pub fn stalled_distribution(state: &ModelState) -> Result<StepResult> {
    if !state.stalled {
        return Err(Error::usage(
            "stalled distribution requested for a model that is not stalled",
        ));
    }
    Ok(StepResult {
        entries: vec![StepEntry {
            token: EPSILON,
            score: state.cum_logprob,
        }],
    })
}

/// Log-likelihood of `ids` under `adapter`; zero for the empty sequence.
pub fn sequence_score(
    adapter: &dyn ModelAdapter,
    conditioning: &str,
    ids: &[TokenId],
) -> Result<f64> {
    let vocab = adapter.vocabulary();
    for &id in ids {
        vocab.check_id(id)?;
    }
    if ids.is_empty() {
        return Ok(0.0);
    }
    adapter.sequence_score(conditioning, ids)
}

/// Natural log of a probability, mapping zero to negative infinity.
pub(crate) fn ln(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

/// `log Σ exp(x)`, tolerant of negative infinities.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Marker, VocabBuilder};

    fn toy() -> ScenarioModel {
        let vocab = VocabBuilder::new(Marker::None)
            .normal(["a", "b"])
            .eos("</s>")
            .build()
            .unwrap();
        ScenarioModel::from_probs(
            "toy",
            vocab,
            vec![
                (vec![], vec![(0, 0.7), (1, 0.2), (2, 0.1)]),
                (vec![0], vec![(0, 0.5), (1, 0.3), (2, 0.2)]),
            ],
            vec![(2, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn step_sorts_table_row() {
        let m = toy();
        let r = step(&m, "", &ModelState::new()).unwrap();
        let toks: Vec<_> = r.entries.iter().map(|e| e.token).collect();
        assert_eq!(toks, vec![0, 1, 2]);
        assert!((r.entries[0].score - 0.7f64.ln()).abs() < 1e-12);
        assert!((r.entries[1].score - 0.2f64.ln()).abs() < 1e-12);
        assert!((r.entries[2].score - 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_shifts_by_cumulative_score() {
        let m = toy();
        let state = ModelState {
            cum_logprob: -1.0,
            ..ModelState::new()
        };
        let r = step(&m, "", &state).unwrap();
        assert_eq!(r.entries[0].token, 0);
        assert!((r.entries[0].score - (-1.0 + 0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_terminated_state() {
        let m = toy();
        let s = ModelState::new()
            .extend(m.vocabulary(), 2, 0.1f64.ln())
            .unwrap();
        assert!(s.is_terminated());
        assert!(matches!(step(&m, "", &s), Err(Error::Usage(_))));
    }

    #[test]
    fn stalled_distribution_is_single_epsilon() {
        for cum in [-1.2, 0.0, -3.5] {
            let s = ModelState {
                cum_logprob: cum,
                stalled: true,
                ..ModelState::new()
            };
            let r = stalled_distribution(&s).unwrap();
            assert_eq!(
                r.entries,
                vec![StepEntry {
                    token: EPSILON,
                    score: cum
                }]
            );
            assert!(r.is_epsilon());
        }
        assert!(stalled_distribution(&ModelState::new()).is_err());
    }

    #[test]
    fn stalled_distribution_ignores_vocabulary_size() {
        let vocab = VocabBuilder::new(Marker::None)
            .eos("</s>")
            .normal((0..63_999).map(|i| format!("p{i}")))
            .build()
            .unwrap();
        assert_eq!(vocab.len(), 64_000);
        let s = ModelState {
            cum_logprob: -3.5,
            stalled: true,
            ..ModelState::new()
        };
        assert_eq!(stalled_distribution(&s).unwrap().len(), 1);
    }

    #[test]
    fn sequence_scores() {
        let m = toy();
        assert_eq!(sequence_score(&m, "", &[]).unwrap(), 0.0);
        assert!((sequence_score(&m, "", &[0]).unwrap() - 0.7f64.ln()).abs() < 1e-12);
        let expected = 0.7f64.ln() + 0.2f64.ln();
        assert!((sequence_score(&m, "", &[0, 2]).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            sequence_score(&m, "", &[7]),
            Err(Error::InvalidToken { .. })
        ));
    }

    #[test]
    fn extend_is_persistent() {
        let m = toy();
        let v = m.vocabulary();
        let s0 = ModelState::new();
        let s1 = s0.extend(v, 0, 0.7f64.ln()).unwrap();
        assert_eq!(s0, ModelState::new());
        assert_eq!(s1.token_ids(), &[0]);
        assert_eq!(s1.bytes(), b"a");
        assert!((s1.cum_logprob() - 0.7f64.ln()).abs() < 1e-15);
        let s2 = s1.extend(v, 2, 0.2f64.ln()).unwrap();
        assert!(s2.is_terminated());
        assert!(matches!(s2.extend(v, 0, 0.0), Err(Error::Usage(_))));
        assert!(s1.extend(v, EPSILON, 0.0).is_err());
    }

    #[test]
    fn rejects_malformed_adapter_output() {
        struct Broken(Vocabulary);
        impl ModelAdapter for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn vocabulary(&self) -> &Vocabulary {
                &self.0
            }
            fn next_log_probs(&self, _: &str, _: &[TokenId]) -> Result<Vec<f64>> {
                Ok(vec![0.0])
            }
        }
        let m = Broken(toy().vocabulary().clone());
        let err = step(&m, "", &ModelState::new()).unwrap_err();
        assert!(err.is_model_failure());
        assert!(err.to_string().contains("broken"));
    }

    #[test]
    fn log_sum_exp_handles_zero_mass() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY])).abs() < 1e-12);
    }
}
