//! The shared global hypothesis and the agreement predicate.
//!
//! A set of local strings agrees when every member is a byte prefix of the
//! global hypothesis `g`. `g` is the shortest terminated member if any member
//! is terminated, otherwise the longest member. A terminated member must equal
//! `g` exactly, so a terminated string that is a proper prefix of a longer
//! member is a disagreement.

use crate::error::{Error, Result};

/// One model's detokenized local hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HypothesisString<'a> {
    pub bytes: &'a [u8],
    pub terminated: bool,
}

impl<'a> HypothesisString<'a> {
    pub fn open(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            terminated: false,
        }
    }

    pub fn terminated(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            terminated: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalHypothesis<'a> {
    pub bytes: &'a [u8],
    pub terminated: bool,
}

/// Computes `g` for a non-empty set.
pub fn global_hypothesis<'a>(set: &[HypothesisString<'a>]) -> Result<GlobalHypothesis<'a>> {
    let g = pick_global(set).ok_or_else(|| Error::usage("global hypothesis of an empty set"))?;
    Ok(GlobalHypothesis {
        bytes: g.bytes,
        terminated: g.terminated,
    })
}

fn pick_global<'a>(set: &[HypothesisString<'a>]) -> Option<HypothesisString<'a>> {
    let shortest_terminated = set.iter().filter(|s| s.terminated).min_by(|a, b| {
        a.bytes
            .len()
            .cmp(&b.bytes.len())
            .then_with(|| a.bytes.cmp(b.bytes))
    });
    if let Some(t) = shortest_terminated {
        return Some(*t);
    }
    // Ties among equally long members only matter when the set disagrees.
    set.iter().max_by_key(|s| s.bytes.len()).copied()
}

/// Whether every member of `set` is consistent with the set's global hypothesis.
/// The empty set trivially agrees.
pub fn agrees(set: &[HypothesisString<'_>]) -> bool {
    let Some(g) = pick_global(set) else {
        return true;
    };
    set.iter().all(|s| {
        if s.terminated {
            s.bytes == g.bytes
        } else {
            g.bytes.starts_with(s.bytes)
        }
    })
}
