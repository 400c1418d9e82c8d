use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss term or activation went non-finite during training.
    #[error("training diagnostic at step {step}: {term} is not finite")]
    NonFinite { term: String, step: u64 },

    #[error("sampling diagnostic: non-finite state at t = {t}")]
    SamplingDiverged { t: usize },

    /// Pairwise dispersion needs at least two masks in a set.
    #[error("dispersion undefined for a {role} set of {len} mask(s)")]
    UndefinedDispersion { role: &'static str, len: usize },

    #[error("trajectory of {requested} bytes exceeds the {cap} byte cap")]
    MemoryCap { requested: usize, cap: usize },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
