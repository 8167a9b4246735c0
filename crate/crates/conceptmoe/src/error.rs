use std::path::PathBuf;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: invalid value at `{key}`: {msg}", path.display())]
    Json { path: PathBuf, key: String, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] conceptmoe_core::Error),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 1 for failed checks and aborted training, 2 for usage, config and IO.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Verify(_) | Self::Core(conceptmoe_core::Error::NonFiniteLoss { .. }) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
