use std::path::PathBuf;

use thiserror::Error;

use crate::optimize::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The quantity asked for is undefined at this input (zero matrix, zero parameters).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Parameters outside the range where a bound is defined (e.g. `eta * lambda >= 1`).
    #[error("invalid regime: {0}")]
    InvalidRegime(String),

    /// Training produced a non-finite value. `last` is the most recent finite checkpoint.
    #[error("divergence at step/time {at}")]
    Divergence {
        at: f64,
        last: Option<Box<Checkpoint>>,
    },

    /// A pre-activation sits exactly on the ReLU kink; retry with a perturbed input.
    #[error("pre-activation {unit} of layer {layer} is exactly zero")]
    Kink { layer: usize, unit: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
