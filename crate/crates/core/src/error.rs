use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a NaN value (strict mode)")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset is empty{0}")]
    EmptyDataset(String),

    #[error("sequence of length {len} exceeds the encoding range {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("training diverged at epoch {epoch} (loss {loss}) for config {config}")]
    Diverged {
        epoch: usize,
        loss: f64,
        config: String,
    },

    #[error("insufficient runs: baseline has {runs}, at least {needed} required")]
    InsufficientRuns { runs: usize, needed: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Whether the failure is caused by user input (bad config, bad file)
    /// rather than by the workbench itself.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::EmptyDataset(_)
                | Error::SequenceTooLong { .. }
                | Error::InsufficientRuns { .. }
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}
