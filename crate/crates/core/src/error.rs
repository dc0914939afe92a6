use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library. Each variant maps onto a distinct CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Architecture or run configuration is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data (frames, tensors, indices) violates a precondition.
    #[error("input error: {0}")]
    Input(String),

    /// An API or command was used in an unsupported way.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents do not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// An internal invariant was breached.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Input(_) => 3,
            Error::Config(_) => 4,
            Error::Io { .. } => 5,
            Error::Format(_) => 6,
            Error::Divergence { .. } => 7,
            Error::Internal(_) => 70,
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
