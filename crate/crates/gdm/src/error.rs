use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lae_core::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("invalid setting: {field}: {reason}")]
    Setting { field: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training aborted after {skipped} consecutive non-finite gradients at step {step}: {detail}")]
    Diverged {
        step: usize,
        skipped: usize,
        detail: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn setting(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Setting {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
