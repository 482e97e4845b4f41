use std::fmt::Display;

use thiserror::Error;

/// Failure classes, one process exit code each.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("port busy: {0}")]
    PortBusy(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
            CliError::PortBusy(_) => 5,
        }
    }

    pub fn config(e: impl Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn data(e: impl Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn backend(e: impl Display) -> Self {
        CliError::Backend(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
