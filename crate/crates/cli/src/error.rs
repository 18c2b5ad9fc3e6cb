use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },

    #[error("incompatible checkpoint:\n  {}", .0.join("\n  "))]
    Incompatible(Vec<String>),

    #[error("numerical check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] csanet::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for failed numerical checks, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 2,
            _ => 1,
        }
    }
}
