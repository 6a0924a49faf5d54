use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had the wrong shape for the block it feeds.
    #[error("dimension mismatch in {block}: expected {expected}, got {got}")]
    DimensionMismatch {
        block: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("diffusion matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NonSymmetric { asymmetry: f64 },

    #[error("trajectory {trajectory} blew up at t = {time}")]
    BlowUp { trajectory: usize, time: f64 },

    #[error(
        "ill-conditioned normal equations (condition estimate {condition:.3e}); \
         use ridge or truncated-SVD regularization"
    )]
    IllConditioned { condition: f64 },

    #[error("weight matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed ensemble file: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. }
                | Error::IllConditioned { .. }
                | Error::NotPositiveDefinite
                | Error::NonFinite(_)
        )
    }
}
