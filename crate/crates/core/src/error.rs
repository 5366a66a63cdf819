use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A reference between entities does not resolve, or an id is duplicated.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} {value} outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid query: {0}")]
    Query(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    // The io error is rendered inline rather than chained as a source, so a
    // single Display already carries the reason.
    #[error("i/o error on {path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error("unsupported store format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("store digest mismatch: manifest says {expected}, content hashes to {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("truncated store file {file}: expected {expected} bytes, found {found}")]
    Truncated {
        file: String,
        expected: u64,
        found: u64,
    },

    #[error("policy failure: {0}")]
    Policy(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
