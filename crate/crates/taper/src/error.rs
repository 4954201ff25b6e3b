//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration file, flag, or option value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad user-supplied data (missing corpus, empty corpus, malformed vocab).
    #[error("input error: {0}")]
    Input(String),

    /// Checkpoint contents inconsistent with the requested model shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN/Inf encountered during training (divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Corrupt or incomplete checkpoint directory.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    /// Process exit code: 2 for configuration/input problems, 1 for runtime
    /// failures (divergence, io, corrupt state).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Shape(_) => 2,
            Error::Numeric(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Serialize(_) => 1,
        }
    }
}
