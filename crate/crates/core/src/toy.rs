//! Random toy scenarios for property tests, oracle checks and demos.
//!
//! A scenario picks a handful of short target strings over a tiny alphabet and
//! builds, for each model, a random vocabulary and a table model that spreads
//! random probability mass over the tokenizations of those targets. Some rows
//! also leak mass to an off-target token so disagreement paths get exercised.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::model::ScenarioModel;
use crate::vocab::{Marker, PieceKind, TokenId, Vocabulary};

pub const ALPHABET: &[u8] = b"abc";

#[derive(Debug, Clone)]
pub struct ToyParams {
    pub models: usize,
    pub vocab_min: usize,
    pub vocab_max: usize,
    pub max_len: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    /// Chance that a table row leaks some mass to an off-target token.
    pub noise: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            models: 2,
            vocab_min: 8,
            vocab_max: 40,
            max_len: 8,
            targets_min: 1,
            targets_max: 4,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyScenario {
    pub targets: Vec<Vec<u8>>,
    pub models: Vec<ScenarioModel>,
    pub max_len: usize,
}

/// Random word sequence such as `" ab c"`; always starts with a space.
pub fn random_text(rng: &mut impl Rng, max_bytes: usize) -> Vec<u8> {
    let max_bytes = max_bytes.max(2);
    let len = rng.gen_range(2..=max_bytes);
    let mut out = vec![b' '];
    while out.len() < len {
        if out.last() != Some(&b' ') && out.len() + 2 <= len && rng.gen_bool(0.25) {
            out.push(b' ');
        } else {
            out.push(*ALPHABET.choose(rng).unwrap());
        }
    }
    out
}

/// Vocabulary of `size` pieces: EOS, every single byte of the alphabet plus
/// space, and random word fragments (an optional leading space then letters).
pub fn random_vocabulary(rng: &mut impl Rng, size: usize) -> Result<Vocabulary> {
    let marker = if rng.gen_bool(0.5) {
        Marker::sentencepiece()
    } else {
        Marker::None
    };
    let render = |bytes: &[u8]| -> String {
        let text = String::from_utf8(bytes.to_vec()).expect("alphabet is ASCII");
        match (&marker, text.strip_prefix(' ')) {
            (Marker::Leading(m), Some(rest)) => format!("{m}{rest}"),
            _ => text,
        }
    };

    let mut seen: BTreeSet<Vec<u8>> = BTreeSet::new();
    let mut pieces = vec![("</s>".to_string(), PieceKind::Eos)];
    for &b in std::iter::once(&b' ').chain(ALPHABET) {
        seen.insert(vec![b]);
        pieces.push((render(&[b]), PieceKind::Normal));
    }
    // 2 × (3 + 9 + 27) fragments exist; stop well before exhausting them.
    let size = size.clamp(pieces.len(), 60);
    while pieces.len() < size {
        let mut frag = Vec::new();
        if rng.gen_bool(0.5) {
            frag.push(b' ');
        }
        for _ in 0..rng.gen_range(1..=3) {
            frag.push(*ALPHABET.choose(rng).unwrap());
        }
        if frag.len() >= 2 && seen.insert(frag.clone()) {
            pieces.push((render(&frag), PieceKind::Normal));
        }
    }
    let mut tail = pieces.split_off(1);
    tail.shuffle(rng);
    pieces.extend(tail);
    Vocabulary::new(marker, pieces)
}

fn random_dist(rng: &mut impl Rng, support: &[TokenId]) -> Vec<(TokenId, f64)> {
    let raw: Vec<f64> = support.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    support
        .iter()
        .zip(raw)
        .map(|(&id, w)| (id, w / total))
        .collect()
}

/// Table model whose mass lies on tokenizations of `targets` (plus occasional noise).
pub fn target_model(
    rng: &mut impl Rng,
    name: &str,
    vocab: Vocabulary,
    targets: &[Vec<u8>],
    max_len: usize,
    noise: f64,
) -> Result<ScenarioModel> {
    let mut rows = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, Vec<u8>)> = vec![(Vec::new(), Vec::new())];
    while let Some((ctx, bytes)) = stack.pop() {
        if ctx.len() >= max_len {
            continue;
        }
        let mut support = Vec::new();
        let mut children = Vec::new();
        for piece in vocab.pieces() {
            match piece.kind {
                PieceKind::Eos if targets.contains(&bytes) => support.push(piece.id),
                PieceKind::Normal => {
                    let mut next = bytes.clone();
                    next.extend_from_slice(piece.bytes());
                    if targets.iter().any(|t| t.starts_with(&next)) {
                        support.push(piece.id);
                        children.push((piece.id, next));
                    }
                }
                _ => {}
            }
        }
        if rng.gen_bool(noise) {
            let off: Vec<TokenId> = vocab
                .pieces()
                .iter()
                .filter(|p| !support.contains(&p.id))
                .map(|p| p.id)
                .collect();
            if let Some(&id) = off.choose(rng) {
                support.push(id);
            }
        }
        if support.is_empty() {
            continue;
        }
        rows.push((ctx.clone(), random_dist(rng, &support)));
        for (id, next) in children {
            let mut c = ctx.clone();
            c.push(id);
            stack.push((c, next));
        }
    }
    ScenarioModel::from_probs(name, vocab, rows, vec![])
}

/// A complete random scenario drawn from `params`.
pub fn random_scenario(rng: &mut impl Rng, params: &ToyParams) -> Result<ToyScenario> {
    let max_len = params.max_len.max(3);
    let n_targets = rng.gen_range(params.targets_min..=params.targets_max.max(params.targets_min));
    let mut targets: Vec<Vec<u8>> = Vec::new();
    for _ in 0..n_targets {
        let t = random_text(rng, (max_len - 1).min(6));
        if !targets.contains(&t) {
            targets.push(t);
        }
    }
    let mut models = Vec::with_capacity(params.models);
    for i in 0..params.models {
        let size = rng.gen_range(params.vocab_min..=params.vocab_max);
        let vocab = random_vocabulary(rng, size)?;
        models.push(target_model(
            rng,
            &format!("toy{i}"),
            vocab,
            &targets,
            max_len,
            params.noise,
        )?);
    }
    Ok(ToyScenario {
        targets,
        models,
        max_len,
    })
}
