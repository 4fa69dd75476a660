use thiserror::Error;

use crate::vocab::TokenId;

/// Errors produced anywhere in the decoding engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid token id {id} for vocabulary of size {size}")]
    InvalidToken { id: TokenId, size: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("model `{model}` failed: {message}")]
    Adapter { model: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("oracle refused to run: {0}")]
    OracleBounds(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn adapter(model: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Adapter {
            model: model.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by a model or its transport, as opposed to bad input.
    pub fn is_model_failure(&self) -> bool {
        matches!(
            self,
            Error::Adapter { .. } | Error::Protocol(_) | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
