//! Command implementations behind the `etsim` binary: trace generation,
//! policy replay, oracle sweeps, and regret comparison. Everything lives in
//! the library so integration tests can drive commands in-process.

pub mod args;
pub mod commands;
pub mod results;

use std::fmt;

/// Errors mapped onto the binary's exit codes: 1 for I/O, 2 for usage, 3 for
/// trace validation. Success is 0.
#[derive(Debug)]
pub enum CliError {
    Io(String),
    Usage(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(msg) => write!(f, "{msg}"),
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Validation(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<etsim_core::traceio::TraceError> for CliError {
    fn from(err: etsim_core::traceio::TraceError) -> Self {
        use etsim_core::traceio::TraceError;
        match err {
            TraceError::Io { .. } => CliError::Io(err.to_string()),
            TraceError::Generator(_) => CliError::Usage(err.to_string()),
            _ => CliError::Validation(err.to_string()),
        }
    }
}

impl From<etsim_core::sim::SimError> for CliError {
    fn from(err: etsim_core::sim::SimError) -> Self {
        use etsim_core::sim::SimError;
        match err {
            SimError::InvalidJob(_)
            | SimError::ScheduleMismatch(..)
            | SimError::InvalidSchedule(_) => CliError::Usage(err.to_string()),
            SimError::Trace(e) => e.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}
