use thiserror::Error;

/// Exit code 1 for anything the user can fix (bad flags, config, inputs),
/// 2 for internal failures.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<bldc_core::Error> for CliError {
    fn from(e: bldc_core::Error) -> Self {
        use bldc_core::Error as E;
        match e {
            E::Generation { .. }
            | E::Shape(_)
            | E::Planning(_)
            | E::ExplorationExhausted
            | E::NonFinite { .. } => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<bldc_service::ApiError> for CliError {
    fn from(e: bldc_service::ApiError) -> Self {
        match e {
            bldc_service::ApiError::Core(c) => c.into(),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::User(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("json: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
