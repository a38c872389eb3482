use std::path::PathBuf;

use pvseg_net::NetError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{failed} of {total} cases failed")]
    Partial { failed: usize, total: usize },
    #[error(transparent)]
    Core(#[from] pvseg_core::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 when some cases failed and the rest were written, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Partial { .. } => 2,
            _ => 1,
        }
    }
}
