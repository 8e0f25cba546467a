use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the normative-modeling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    /// A required column is missing or headers do not match the file contract.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be parsed. Rows are 1-based data rows (header excluded).
    #[error("parse error in {path} at row {row}, column '{column}': {value:?} is not a valid {expected}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
        expected: &'static str,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unseen categorical level(s) for {covariate}: {levels:?}")]
    UnseenLevel { covariate: String, levels: Vec<String> },

    #[error("region mismatch; missing regions: {missing:?}")]
    RegionMismatch { missing: Vec<String> },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Csv { path: path.into(), message: err.to_string() }
    }
}
