//! Error type shared across the crate.
//!
//! Variant names are stable and appear verbatim in CLI output, so callers
//! (and tests) can match on the leading token of the message.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("NotFound: {0}")]
    NotFound(PathBuf),

    #[error("InvalidDataset: {0}")]
    InvalidDataset(String),

    #[error("DecodeError: {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },

    #[error("ShapeError: {0}")]
    ShapeError(String),

    #[error("InvalidParam: {0}")]
    InvalidParam(String),

    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),

    #[error("InvalidSplit: {0}")]
    InvalidSplit(String),

    #[error("LabelError: {0}")]
    LabelError(String),

    #[error("CorruptCheckpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("ConfigError: {0}")]
    ConfigError(String),

    #[error("DivergedError: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("IOError: {0}")]
    Io(#[from] std::io::Error),

    #[error("IOError: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
