use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid record '{sample_id}'{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    InvalidRecord {
        sample_id: String,
        line: Option<usize>,
        message: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unknown class '{0}'")]
    UnknownClass(String),
    #[error("class '{0}' has zero instances, weight would be infinite (oversample it first)")]
    ZeroCount(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),
    #[error("missing forward cache: {0}")]
    MissingCache(String),
    #[error("image format error: {0}")]
    Image(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::InvalidRecord { .. }
                | Error::InvalidArgument(_)
                | Error::Empty(_)
                | Error::UnknownClass(_)
                | Error::ZeroCount(_)
                | Error::ShapeMismatch { .. }
                | Error::UnsupportedArchitecture(_)
                | Error::Image(_)
                | Error::Json(_)
        )
    }
}
