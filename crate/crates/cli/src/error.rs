use std::path::PathBuf;

use crate::config::ConfigReport;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config:\n{0}")]
    Config(#[from] ConfigReport),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] sage_core::Error),
    #[error("sweep: {0}")]
    Sweep(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Sweep(_) => 2,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
