//! Weighted length-normalized scoring shared by the search, the decoders and the oracle.

use crate::error::{Error, Result};

/// One model's cumulative log-probability and token count after a proposed extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelScore {
    pub cum_logprob: f64,
    pub length: usize,
}

/// `Σ λᵢ · cumᵢ / lenᵢ`.
///
/// Lengths count every token of the local hypothesis including EOS. A zero
/// length is treated as one so the empty initial hypotheses score as zero.
pub fn combined_score(weights: &[f64], parts: &[ModelScore]) -> Result<f64> {
    if weights.len() != parts.len() {
        return Err(Error::usage(format!(
            "{} weights for {} models",
            weights.len(),
            parts.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::usage("weights must be finite and nonnegative"));
    }
    Ok(combined_score_unchecked(weights, parts.iter().copied()))
}

#[inline]
pub(crate) fn combined_score_unchecked(
    weights: &[f64],
    parts: impl IntoIterator<Item = ModelScore>,
) -> f64 {
    let mut total = 0.0;
    for (w, p) in weights.iter().zip(parts) {
        if *w == 0.0 {
            continue;
        }
        total += w * (p.cum_logprob / p.length.max(1) as f64);
    }
    total
}

/// Checks weights are nonnegative and sum to one within `1e-9`.
pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::config("at least one model weight is required"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("weights must be finite and nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
