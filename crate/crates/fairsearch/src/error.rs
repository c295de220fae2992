//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up; the message names the
    /// offending dimension.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A numeric guard fired (e.g. a zero-norm embedding column).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed serialized data (genotype, manifest, checkpoint, ...).
    #[error("parse error: {0}")]
    Parse(String),

    /// A dataset file does not follow the binary record format.
    #[error("data format error: {0}")]
    DataFormat(String),

    /// Artifacts from different run configurations were combined.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// A gradient check exceeded its tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
