use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the factorization library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("loss became non-finite ({loss}) at iteration {iteration}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("no usable samples: {0}")]
    EmptyResult(String),

    #[error("malformed array file: {0}")]
    Format(String),

    #[error("malformed metadata in {path}: {message}")]
    Metadata { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical procedure itself, as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::Eigen(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
