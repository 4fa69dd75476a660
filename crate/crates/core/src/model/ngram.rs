use std::collections::HashMap;

use super::{ln, ModelAdapter};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Token n-gram language model with add-alpha smoothing over a fixed support.
///
/// Over a vocabulary of single-byte pieces this is a byte n-gram model. Ids
/// outside the support always get probability zero.
#[derive(Debug, Clone)]
pub struct NgramModel {
    name: String,
    vocab: Vocabulary,
    order: usize,
    alpha: f64,
    support: Vec<TokenId>,
    counts: HashMap<Vec<TokenId>, HashMap<TokenId, f64>>,
}

impl NgramModel {
    pub const DEFAULT_ALPHA: f64 = 0.1;

    /// `order` counts the predicted token, so `order = 1` is a unigram model.
    pub fn new(
        name: impl Into<String>,
        vocab: Vocabulary,
        order: usize,
        support: Vec<TokenId>,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("n-gram order must be at least 1"));
        }
        if support.is_empty() {
            return Err(Error::config("n-gram support is empty"));
        }
        for &id in &support {
            vocab.check_id(id)?;
        }
        let mut support = support;
        support.sort_unstable();
        support.dedup();
        Ok(Self {
            name: name.into(),
            vocab,
            order,
            alpha: Self::DEFAULT_ALPHA,
            support,
            counts: HashMap::new(),
        })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::config("smoothing constant must be positive"));
        }
        self.alpha = alpha;
        Ok(self)
    }

    /// Accumulates counts from `text`, tokenized greedily and closed with EOS.
    pub fn train(&mut self, text: &[u8]) -> Result<()> {
        let mut ids = self.vocab.tokenize_greedy(text)?;
        ids.push(self.vocab.eos());
        for t in 0..ids.len() {
            let ctx = self.context(&ids[..t]).to_vec();
            *self
                .counts
                .entry(ctx)
                .or_default()
                .entry(ids[t])
                .or_default() += 1.0;
        }
        Ok(())
    }

    fn context<'a>(&self, prefix: &'a [TokenId]) -> &'a [TokenId] {
        let keep = (self.order - 1).min(prefix.len());
        &prefix[prefix.len() - keep..]
    }
}

impl ModelAdapter for NgramModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, _conditioning: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let seen = self.counts.get(self.context(prefix));
        let total: f64 = seen
            .map(|c| {
                self.support
                    .iter()
                    .map(|id| c.get(id).copied().unwrap_or(0.0))
                    .sum()
            })
            .unwrap_or(0.0);
        let denom = total + self.alpha * self.support.len() as f64;
        let mut out = vec![f64::NEG_INFINITY; self.vocab.len()];
        for &id in &self.support {
            let c = seen.and_then(|c| c.get(&id)).copied().unwrap_or(0.0);
            out[id as usize] = ln((c + self.alpha) / denom);
        }
        Ok(out)
    }
}
