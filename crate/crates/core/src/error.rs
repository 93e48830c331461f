//! Error types shared across the engine.

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A contract precondition was violated by the caller.
    #[error("contract violation in {context}: {message}")]
    Contract {
        context: &'static str,
        message: String,
    },

    /// A non-finite value appeared where all values must be finite.
    #[error("non-finite value produced by op `{op}` (first bad index {index}, value {value})")]
    NonFinite {
        op: String,
        index: usize,
        value: f64,
    },

    /// Binary/JSON input could not be parsed. `offset` is a byte offset
    /// into the input where the problem was detected.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Configuration file rejected.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::DimMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn contract(context: &'static str, message: impl Into<String>) -> Self {
        Error::Contract {
            context,
            message: message.into(),
        }
    }
}
