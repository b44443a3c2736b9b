use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("no interactions")]
    NoInteractions,

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: unparseable feedback value {value:?}")]
    BadFeedback { line: usize, value: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible artifacts: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
