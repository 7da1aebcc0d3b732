use std::process::ExitCode;

/// CLI-level error with a documented exit code per class:
/// 2 configuration, 3 validation, 4 numeric, 5 guard refusal, 1 everything
/// else (IO and the like).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] metrex_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use metrex_core::Error as E;
        let code: u8 = match self {
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::InvalidArgument(_) | E::Validation(_) | E::InvalidAction(_)
                | E::InvalidState(_) => 3,
                E::Numeric(_) => 4,
                E::Guard(_) => 5,
            },
            CliError::Config(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Io(_) => 1,
            CliError::Json(_) => 3,
        };
        ExitCode::from(code)
    }
}

pub type CliResult<T> = Result<T, CliError>;
