use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("corrupt checkpoint payload: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint stage is {found}, expected {expected}")]
    StageMismatch { found: String, expected: String },

    #[error("pair file line {line}: {message}")]
    PairFile { line: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Core(#[from] fade_core::FadeError),

    #[error(transparent)]
    Autodiff(#[from] fade_autodiff::AutodiffError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
