//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer dimensions do not agree.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Invalid configuration value or file.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (non-scalar loss, reused tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numeric failure (non-finite value, zero norm, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A dataset file failed validation; names the offending video.
    #[error("dataset error for video '{video}': {details}")]
    Data { video: String, details: String },

    /// The requested split cannot be built.
    #[error("infeasible split: {0}")]
    Infeasible(String),

    /// A stored artifact (checkpoint, cluster model) does not match the
    /// configuration it is being used with.
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }
}
