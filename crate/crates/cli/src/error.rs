use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] normgauge::Error),

    #[error("{0}")]
    Usage(String),

    #[error("missing required input: {0}")]
    Missing(String),

    #[error("cannot read config {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
}

impl CliError {
    /// 2 input/IO, 3 schema/compatibility, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use normgauge::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Schema(_) | E::UnseenLevel { .. } | E::RegionMismatch { .. } => 3,
                E::Numerical(_) => 4,
                _ => 2,
            },
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
