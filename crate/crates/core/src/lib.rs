//! Agreement-based ensembling of generative models with different vocabularies.
//!
//! Each model keeps its own tokenization. At every step the decoder searches
//! the joint space of per-model next tokens, keeping only combinations whose
//! detokenized strings agree, and scores them by a weighted sum of
//! length-normalized log-probabilities.

pub mod agreement;
pub mod baseline;
pub mod decoder;
pub mod error;
pub mod model;
pub mod oracle;
pub mod remote;
pub mod score;
pub mod search;
pub mod toy;
pub mod vocab;

pub use agreement::{agrees, global_hypothesis, GlobalHypothesis, HypothesisString};
pub use baseline::{decode_single, interpolate_step, InterpolationEnsemble};
pub use decoder::{
    decode, decode_observed, sample_decode, DecodeMode, EnsembleConfig, Hypothesis, InvariantAudit,
};
pub use error::{Error, Result};
pub use model::{ModelAdapter, ModelState, NgramModel, ScenarioModel, StepEntry, StepResult};
pub use oracle::{enumerate_joint, OracleResult};
pub use vocab::{Marker, PieceKind, TokenId, Vocabulary, EPSILON};
