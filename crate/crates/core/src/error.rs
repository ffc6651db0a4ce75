//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor construction and tensor/tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Two shapes that were required to agree did not.
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single shape was structurally invalid for the requested operation.
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// An argument outside shape checking was invalid (bad permutation, non-scalar loss, ...).
    #[error("{op}: invalid argument: {reason}")]
    Argument { op: &'static str, reason: String },

    /// A non-finite value was fed into or produced by an operation.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub fn argument(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Argument {
            op,
            reason: reason.into(),
        }
    }
}

/// Configuration errors name the offending field so CLI users can fix the file.
#[derive(Debug, Error)]
#[error("configuration error in field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Top-level error for the pipeline and CLI layers.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
}

impl PipelineError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, reason: impl Into<String>) -> Self {
        PipelineError::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type TensorResult<T> = Result<T, TensorError>;
pub type PipelineResult<T> = Result<T, PipelineError>;
