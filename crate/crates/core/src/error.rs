use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DmsnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DmsnError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown branch {branch} (model has {available} branches)")]
    UnknownBranch { branch: usize, available: usize },

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("parameter aggregation error: {0}")]
    Aggregation(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("corrupt data at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("training run failed: {0}")]
    RunFailed(String),
}

impl DmsnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DmsnError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for DmsnError {
    fn from(e: serde_json::Error) -> Self {
        DmsnError::Serde(e.to_string())
    }
}

impl From<csv::Error> for DmsnError {
    fn from(e: csv::Error) -> Self {
        DmsnError::Serde(e.to_string())
    }
}
