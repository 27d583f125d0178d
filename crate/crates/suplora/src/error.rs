use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("missing input {path}: run `{stage}` first")]
    MissingInput { path: PathBuf, stage: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::NonFinite(_) | Self::Rank(_) | Self::Diverged(_) | Self::Singular(_)
        )
    }
}
