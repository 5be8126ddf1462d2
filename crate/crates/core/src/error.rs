use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ranking for agent {agent}: {reason}")]
    InvalidRanking { agent: String, reason: String },

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("schema mismatch in {file} at record {record}: {message}")]
    Schema {
        file: String,
        record: usize,
        message: String,
    },

    #[error("duplicate agent identifier {id:?} in {file} at record {record}")]
    DuplicateAgent {
        file: String,
        record: usize,
        id: String,
    },

    #[error("unknown alternative label {label:?} in {file} at record {record}")]
    UnknownAlternative {
        file: String,
        record: usize,
        label: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty choice set")]
    EmptyChoiceSet,

    #[error("nest scale {value} for nest {nest} is outside (0, 1]")]
    NestScale { nest: usize, value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parameter fingerprint {found} does not match data fingerprint {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("objective became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent input rather than
    /// a failure while computing.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Diverged { .. } | Error::Io { .. } | Error::Unsupported(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
