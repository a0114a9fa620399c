use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {path}: {reason}")]
    MissingInput { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] stackdrive::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput { .. } => 3,
            Self::Core(stackdrive::Error::InvalidScenario(_) | stackdrive::Error::InvalidParams(_)) => 2,
            Self::Core(stackdrive::Error::UnknownDriverType(_) | stackdrive::Error::Parse(_)) => 2,
            _ => 1,
        }
    }

    pub fn missing(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::MissingInput { path: path.into(), reason: reason.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
