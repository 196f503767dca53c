use std::io;

use thiserror::Error;

pub type Result<T, E = SegtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SegtError {
    /// A point failed validation while a cloud was being ingested.
    #[error("point {index}: {reason}")]
    Ingest { index: usize, reason: String },

    /// An argument lies outside the domain of a curve or transform.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates an invariant.
    #[error("invalid `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// Config text could not be parsed.
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// Two operands disagree on shape, or a cache does not belong to its input.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value reached a numeric kernel.
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    /// A binary container is malformed.
    #[error("bad {container} container: {reason}")]
    Format {
        container: &'static str,
        reason: String,
    },

    /// A binary container ended early.
    #[error("truncated {container} container: needed {needed} more bytes at offset {offset}")]
    Truncated {
        container: &'static str,
        offset: usize,
        needed: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SegtError {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        SegtError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SegtError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SegtError::Domain(msg.into())
    }
}
