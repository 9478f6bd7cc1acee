use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("empty video")]
    EmptyVideo,
    #[error("frame file {file}: expected {expected}, found {found}")]
    FrameMismatch { file: String, expected: String, found: String },
    #[error("malformed frame file {file}: {reason}")]
    BadFrame { file: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("divisibility violation: {0}")]
    Divisibility(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("missing context latent for chunk {0}")]
    MissingContext(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
