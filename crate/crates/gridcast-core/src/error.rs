//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration or mismatched shapes between configured modules.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint file failed its integrity check.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// Checkpoint was produced under a different configuration.
    #[error("config fingerprint mismatch: checkpoint {found} vs current {expected}")]
    Fingerprint { expected: String, found: String },

    /// Training diverged (NaN loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
