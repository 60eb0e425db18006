//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: argument
//! and configuration problems, data/file problems, and numeric faults.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed an out-of-contract argument (bad quality factor,
    /// mismatched tensor shapes, non-multiple-of-8 dimensions, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value or combination is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input file could not be decoded.
    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    /// An I/O operation failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint file is corrupt or does not match the requested model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A computation produced NaN/Inf or two redundant routes disagreed.
    #[error("numeric fault: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn decode(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
