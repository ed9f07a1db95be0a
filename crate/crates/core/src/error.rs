use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("degenerate 6D rotation code {0:?}")]
    DegenerateRotation([f64; 6]),
    #[error("invalid body model: {0}")]
    InvalidModel(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("sequence too short: {0}")]
    TooShort(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("result store is empty")]
    EmptyStore,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of internal consistency rather than of user input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::Invariant(_) | Error::Diff(_) | Error::DegenerateRotation(_) | Error::Shape(_)
        )
    }
}
