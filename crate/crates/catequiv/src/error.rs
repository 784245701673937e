//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by tensor ops, the data pipeline, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or argument violation in a tensor operation. Names the operation
    /// and describes the offending extents.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration or argument value.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Dataset file problem (missing file, row-count mismatch, bad token).
    #[error("data error in {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    /// Non-finite value where one is not permitted.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Checkpoint container problem (version, missing tensor, shape mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
