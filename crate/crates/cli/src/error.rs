use dialoflow_core::Error as CoreError;
use serde::Serialize;
use thiserror::Error;

/// Failure of a CLI command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Internal(_) => "internal",
        }
    }

    /// Machine-readable form printed with `--json`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::json!({ "error": Body { kind: self.kind(), exit_code: self.exit_code(), message: self.to_string() } })
            .to_string()
    }
}

/// Errors caused by bad inputs are data errors; the rest point at a bug.
pub fn is_data_error(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::Config(_)
            | CoreError::Corpus(_)
            | CoreError::Encoding(_)
            | CoreError::Checkpoint(_)
            | CoreError::Evaluation(_)
            | CoreError::Io { .. }
            | CoreError::Json(_)
    )
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        if is_data_error(&e) {
            CliError::Data(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
