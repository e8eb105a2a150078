use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("{file}: tier '{tier}' not found")]
    MissingTier { file: String, tier: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in parameter '{0}'")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::MissingTier { .. }
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Size(_)
                | Error::Domain(_)
                | Error::Format(_)
                | Error::Corruption(_)
                | Error::Conflict(_)
        )
    }
}
