//! Command implementations behind the `vitkd` binary: train, adapt,
//! explain and report. Kept as a library so integration tests can drive
//! the exact code paths the binary runs.

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;

use serde::Serialize;

/// Errors split by exit code: validation failures exit 2, runtime
/// failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn validation_from(e: vitkd_core::Error) -> Self {
        CliError::Validation(e.to_string())
    }

    pub fn runtime_from(e: vitkd_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Machine-readable error record printed to stderr on failure.
#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub format_version: u32,
    pub kind: &'a str,
    pub message: &'a str,
}

impl CliError {
    pub fn record(&self) -> String {
        serde_json::to_string(&ErrorRecord {
            format_version: 1,
            kind: self.kind(),
            message: self.message(),
        })
        .expect("error record serializes")
    }
}
