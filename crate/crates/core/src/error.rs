use std::path::PathBuf;

use thiserror::Error;

use crate::ltns::LtnsError;
use crate::modelrt::RunnerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("layer configuration mismatch: {0}")]
    LayerConfig(String),

    #[error("dataset error at {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("undefined gradient: all logits are equal (g = 0)")]
    UndefinedGradient,

    #[error(transparent)]
    Ltns(#[from] LtnsError),

    #[error(transparent)]
    Runner(#[from] RunnerError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the failure originates behind the model-runner boundary.
    pub fn is_runner_error(&self) -> bool {
        matches!(self, Error::Runner(_))
    }
}
