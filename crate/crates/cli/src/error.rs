use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] taskdecomp::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 0 success, 1 usage or config problem, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradCheck(_) | CliError::Core(taskdecomp::Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}
