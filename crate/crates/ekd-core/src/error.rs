//! Error type shared across the engine.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EkdError>;

#[derive(Debug, Error)]
pub enum EkdError {
    /// Tensor operands do not conform (dimension arithmetic failed).
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A forward pass or loss produced a non-finite value.
    #[error("numeric instability in {context}: non-finite value")]
    NumericInstability { context: String },

    /// A caller violated an API contract (wrong root, mismatched pair counts, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model or dataset specification is internally inconsistent.
    #[error("invalid spec: {0}")]
    Spec(String),

    /// Experiment configuration could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset file is malformed or labels are out of range.
    #[error("dataset error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EkdError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        EkdError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        EkdError::NumericInstability {
            context: context.into(),
        }
    }

    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.as_ref().to_path_buf();
        move |source| EkdError::Io { path, source }
    }
}
