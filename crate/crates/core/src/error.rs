use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its constraint.
    #[error("config error: {field}: {reason}")]
    Config { field: String, reason: String },

    /// Input data is inconsistent (ids out of range, shape mismatch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values in logits, gradients or parameters.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty corpus: frequency table has total 0")]
    EmptyCorpus,

    #[error("self-information undefined for token {id}: probability is 0")]
    UndefinedInformation { id: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error in {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(path: &std::path::Path, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
