//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("{what}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: String,
        index: usize,
        limit: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("UV map space mismatch: expected {expected}, got {got}")]
    SpaceMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("malformed header in {0}")]
    MalformedHeader(String),

    #[error("truncated payload in {0}")]
    TruncatedPayload(String),

    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),

    #[error("parse error in {file} at line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }
}
