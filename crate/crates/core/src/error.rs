use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("divisibility error: {what} requires g={g} to divide H={h} and W={w}")]
    Divisibility {
        what: &'static str,
        h: usize,
        w: usize,
        g: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Weights(#[from] WeightsError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, shapes) as
    /// opposed to runtime or I/O failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Divisibility { .. } | Error::Dimension(_)
        )
    }
}

/// Failures while decoding or matching a weights file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightsError {
    #[error("bad magic bytes {found:?}, expected \"HATW\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weights format version {0}")]
    UnsupportedVersion(u32),

    #[error("weights file truncated while reading {context}")]
    Truncated { context: &'static str },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed weights file: {0}")]
    Malformed(String),

    #[error("parameter name mismatch: {0}")]
    NameMismatch(String),

    #[error("shape mismatch for {name}: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}
