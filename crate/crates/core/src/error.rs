use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while decoding one of the binary container formats.
///
/// Every variant carries the byte offset at which decoding stopped.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("truncated input at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported version {found} at byte {offset} (supported: {supported})")]
    UnsupportedVersion { offset: usize, found: u32, supported: u32 },

    #[error("invalid content at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error(transparent)]
    Parse(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
