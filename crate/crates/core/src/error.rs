use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {d}x{h}x{w}: {reason}")]
    InvalidShape {
        d: usize,
        h: usize,
        w: usize,
        reason: &'static str,
    },

    #[error("index ({c}, {i}, {j}, {k}) out of bounds for {channels} channel(s) of {d}x{h}x{w}")]
    OutOfBounds {
        c: usize,
        i: usize,
        j: usize,
        k: usize,
        channels: usize,
        d: usize,
        h: usize,
        w: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("backward called with a tape that does not belong to these parameters")]
    StaleTape,

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unexpected dtype code {found} in {path} (expected {expected})")]
    DtypeMismatch {
        path: PathBuf,
        expected: u8,
        found: u8,
    },

    #[error("checkpoint does not match network configuration: {0}")]
    CheckpointMismatch(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
