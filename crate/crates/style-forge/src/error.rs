use std::path::{Path, PathBuf};

use style_forge_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// 0 success, 1 usage/config, 2 IO, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Io { .. } | Self::Format { .. } => 2,
            Self::Core(CoreError::Divergence { .. }) => 3,
            Self::Core(_) => 1,
        }
    }
}
