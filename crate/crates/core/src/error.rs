use std::path::PathBuf;

use adljepa_autodiff::AutodiffError;
use thiserror::Error;

use crate::trainer::LossBreakdown;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path}: {detail} (byte offset {offset})")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("numerical abort at step {step}: {reason}")]
    NumericalAbort {
        step: u64,
        reason: String,
        last: Option<Box<LossBreakdown>>,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
