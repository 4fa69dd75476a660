//! Brute-force reference decoder for small instances.
//!
//! Enumerates every joint tokenization depth-first, always advancing the
//! unterminated model whose local string is shortest (lowest index on ties),
//! pruning as soon as the locals disagree. Only the vocabulary, agreement and
//! score primitives are shared with the real decoder.

use crate::agreement::{agrees, HypothesisString};
use crate::error::{Error, Result};
use crate::model::ModelAdapter;
use crate::score::{combined_score, ModelScore};
use crate::vocab::TokenId;

pub const MAX_VOCAB: usize = 64;
pub const MAX_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEntry {
    pub bytes: Vec<u8>,
    pub tokens: Vec<Vec<TokenId>>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleResult {
    /// Completed agreeing joint hypotheses, best first.
    pub ranked: Vec<OracleEntry>,
    /// Number of completed hypotheses before truncation to the requested top-k.
    pub total: usize,
}

#[derive(Clone)]
struct Local {
    ids: Vec<TokenId>,
    cum: f64,
    bytes: Vec<u8>,
    terminated: bool,
}

struct Search<'a> {
    models: &'a [&'a dyn ModelAdapter],
    conditioning: &'a [&'a str],
    weights: &'a [f64],
    max_len: usize,
    prune: bool,
    out: Vec<OracleEntry>,
}

impl Search<'_> {
    fn consistent(locals: &[Local]) -> bool {
        let set: Vec<_> = locals
            .iter()
            .map(|l| HypothesisString {
                bytes: &l.bytes,
                terminated: l.terminated,
            })
            .collect();
        agrees(&set)
    }

    fn visit(&mut self, locals: &mut Vec<Local>) -> Result<()> {
        let next = locals
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.terminated)
            .min_by_key(|(i, l)| (l.bytes.len(), *i))
            .map(|(i, _)| i);
        let Some(m) = next else {
            if Self::consistent(locals) {
                let parts: Vec<_> = locals
                    .iter()
                    .map(|l| ModelScore {
                        cum_logprob: l.cum,
                        length: l.ids.len(),
                    })
                    .collect();
                self.out.push(OracleEntry {
                    bytes: locals[0].bytes.clone(),
                    tokens: locals.iter().map(|l| l.ids.clone()).collect(),
                    score: combined_score(self.weights, &parts)?,
                });
            }
            return Ok(());
        };
        if locals[m].ids.len() >= self.max_len {
            return Ok(());
        }

        let model = self.models[m];
        let vocab = model.vocabulary();
        let lp = model.next_log_probs(self.conditioning[m], &locals[m].ids)?;
        let saved = locals[m].clone();
        for (id, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let piece = vocab.piece(id as TokenId)?;
            {
                let local = &mut locals[m];
                local.ids.push(id as TokenId);
                local.cum = saved.cum + l;
                local.bytes.extend_from_slice(piece.bytes());
                local.terminated = id as TokenId == vocab.eos();
            }
            if !self.prune || Self::consistent(locals) {
                self.visit(locals)?;
            }
            locals[m] = saved.clone();
        }
        Ok(())
    }
}

fn check_bounds(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    weights: &[f64],
    max_len: usize,
) -> Result<()> {
    if models.is_empty() {
        return Err(Error::OracleBounds("no models".into()));
    }
    if conditioning.len() != models.len() || weights.len() != models.len() {
        return Err(Error::usage(
            "one conditioning input and one weight per model",
        ));
    }
    if max_len > MAX_LEN {
        return Err(Error::OracleBounds(format!(
            "max_len {max_len} exceeds {MAX_LEN}"
        )));
    }
    if let Some(m) = models.iter().find(|m| m.vocabulary().len() > MAX_VOCAB) {
        return Err(Error::OracleBounds(format!(
            "vocabulary of `{}` has {} pieces, more than {MAX_VOCAB}",
            m.name(),
            m.vocabulary().len()
        )));
    }
    Ok(())
}

fn run(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    weights: &[f64],
    max_len: usize,
    top: usize,
    prune: bool,
) -> Result<OracleResult> {
    check_bounds(models, conditioning, weights, max_len)?;
    let mut search = Search {
        models,
        conditioning,
        weights,
        max_len,
        prune,
        out: Vec::new(),
    };
    let mut locals = vec![
        Local {
            ids: Vec::new(),
            cum: 0.0,
            bytes: Vec::new(),
            terminated: false,
        };
        models.len()
    ];
    search.visit(&mut locals)?;
    let mut ranked = search.out;
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.bytes.cmp(&b.bytes))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let total = ranked.len();
    ranked.truncate(top);
    Ok(OracleResult { ranked, total })
}

/// Top-`top` completed joint hypotheses by combined length-normalized score.
pub fn enumerate_joint(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    weights: &[f64],
    max_len: usize,
    top: usize,
) -> Result<OracleResult> {
    run(models, conditioning, weights, max_len, top, true)
}

/// Same enumeration without agreement pruning; exponential, for validating the pruning.
pub fn enumerate_joint_unpruned(
    models: &[&dyn ModelAdapter],
    conditioning: &[&str],
    weights: &[f64],
    max_len: usize,
    top: usize,
) -> Result<OracleResult> {
    run(models, conditioning, weights, max_len, top, false)
}
