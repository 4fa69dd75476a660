//! Message grammar for protocol `abe/1`.
//!
//! Every frame is one UTF-8 JSON object on a single line. Requests carry a
//! client-chosen `id` that the matching response echoes. Floating-point values
//! travel as shortest round-trip decimal strings (`"-0.35667494393873245"`,
//! `"-inf"`), so a log-probability survives the wire bit-for-bit.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::vocab::{TokenId, Vocabulary};

pub const PROTOCOL_VERSION: &str = "abe/1";

/// An `f64` carried as its shortest round-trip decimal string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireFloat(pub f64);

impl Serialize for WireFloat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for WireFloat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = WireFloat;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a decimal string")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<WireFloat, E> {
                v.parse::<f64>()
                    .map(WireFloat)
                    .map_err(|_| E::custom(format!("invalid decimal {v:?}")))
            }
        }
        d.deserialize_str(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Request {
    Hello {
        id: u64,
        version: String,
    },
    Vocab {
        id: u64,
    },
    StartSession {
        id: u64,
        conditioning: String,
    },
    Step {
        id: u64,
        session: String,
        prefix: Vec<TokenId>,
    },
    Score {
        id: u64,
        session: String,
        ids: Vec<TokenId>,
    },
    EndSession {
        id: u64,
        session: String,
    },
}

impl Request {
    pub fn id(&self) -> u64 {
        match self {
            Request::Hello { id, .. }
            | Request::Vocab { id }
            | Request::StartSession { id, .. }
            | Request::Step { id, .. }
            | Request::Score { id, .. }
            | Request::EndSession { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    Hello {
        id: u64,
        version: String,
        name: String,
    },
    Vocab {
        id: u64,
        vocabulary: Vocabulary,
    },
    StartSession {
        id: u64,
        session: String,
    },
    /// Full next-token distribution, sorted by log-probability descending.
    Step {
        id: u64,
        entries: Vec<(TokenId, WireFloat)>,
    },
    Score {
        id: u64,
        logprob: WireFloat,
    },
    EndSession {
        id: u64,
    },
    Error {
        id: Option<u64>,
        message: String,
    },
}

impl Response {
    pub fn id(&self) -> Option<u64> {
        match self {
            Response::Hello { id, .. }
            | Response::Vocab { id, .. }
            | Response::StartSession { id, .. }
            | Response::Step { id, .. }
            | Response::Score { id, .. }
            | Response::EndSession { id } => Some(*id),
            Response::Error { id, .. } => *id,
        }
    }
}
