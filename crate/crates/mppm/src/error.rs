use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] mppm_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 1 for problems with the invocation or configuration, 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(mppm_core::Error::InvalidConfig(_)) | Self::Core(mppm_core::Error::InvalidDegradation(_)) => 1,
            _ => 2,
        }
    }
}
