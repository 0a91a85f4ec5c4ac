use sgxp_core::Error as CoreError;
use sgxp_review::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or inputs.
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl CliError {
    /// 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Core(e) if e.is_validation() || matches!(e, CoreError::Usage(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Store(StoreError::Uninitialized(_) | StoreError::Corrupt(_)) => 1,
            CliError::Store(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}
