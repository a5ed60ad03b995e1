//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, data handling, and the harness.
#[derive(Debug, Error)]
pub enum ThornError {
    /// A tensor had the wrong shape for an operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// An input value violated a precondition (out of range, non-finite, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration file or config value was rejected.
    #[error("config error: {0}")]
    Config(String),

    /// A data file could not be parsed.
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// A checkpoint file was malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ThornError>;

impl ThornError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        ThornError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
