use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero vector passed to cosine")]
    ZeroVector,

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown item {0}")]
    UnknownItem(u32),

    #[error("item {0} has no semantic id")]
    MissingSid(u32),

    #[error("item {0} has no fused embedding")]
    MissingEmbedding(u32),

    #[error("code {code} out of range at level {level} (codebook size {size})")]
    CodeOutOfRange { level: usize, code: usize, size: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("no qualifying sample for task {0}")]
    NoQualifyingSample(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
