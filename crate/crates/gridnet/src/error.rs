use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a sequence of {expected} scans, got {got}")]
    SequenceLength { expected: usize, got: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("weights file {path}: {msg}")]
    Weights { path: PathBuf, msg: String },

    #[error("training diverged at epoch {epoch}: loss {loss} exceeds {limit}")]
    Diverged { epoch: usize, loss: f64, limit: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] storm_core::Error),
}
