use std::path::PathBuf;

use thiserror::Error;

use crate::math::MathError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("user {user}: support size {requested} needs more than {available} instances")]
    InsufficientHistory {
        user: String,
        requested: usize,
        available: usize,
    },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("checkpoint does not match the configured model: {0}")]
    SpecMismatch(String),
    #[error("unrecognized file format: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("missing support set: {0}")]
    MissingSupport(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SpecMismatch(_) => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::InsufficientHistory { .. }
            | Error::InvalidData(_)
            | Error::EmptyDataset(_)
            | Error::Format(_)
            | Error::MissingSupport(_) => 3,
            Error::Diverged { .. } => 4,
            Error::Math(_) | Error::Undefined(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
