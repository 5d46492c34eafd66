//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    DimMismatch {
        context: &'static str,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated data file {path}: expected {expected} bytes, found {found}")]
    TruncatedData {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("template estimation failed on repeat {repeat}: {source}")]
    TemplateMemberFailed {
        repeat: usize,
        #[source]
        source: Box<CoreError>,
    },

    #[error("training aborted: non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("pipeline stage '{stage}' failed: {message}")]
    StageFailed { stage: String, message: String },

    #[error("output tree is locked by another process: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
