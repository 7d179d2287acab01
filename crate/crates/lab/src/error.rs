use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse { file: PathBuf, line: u64, message: String },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] mixhar_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(file: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Self::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// Configuration problems (including invalid core configs) map to exit
    /// code 2; everything else is a generic failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Json { .. } | Self::Core(mixhar_core::Error::Config(_))
        )
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
