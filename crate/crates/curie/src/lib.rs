//! Experiment driver for `curie-core`: JSON configs, checkpoints, result
//! files and the `curie` command line.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod output;
pub mod run;
pub mod tables;

use std::fmt;

/// Failure classes, each with its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad config, checkpoint or arguments; nothing was computed.
    Validation(String),
    /// Training diverged; partial history was saved.
    Diverged {
        step: usize,
    },
    /// A check failed its tolerance.
    CheckFailed,
    Failed(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::CheckFailed => 1,
            CliError::Failed(_) | CliError::Io(_) => 4,
        }
    }

    pub(crate) fn csv(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Diverged { step } => write!(f, "training diverged at step {step}"),
            CliError::CheckFailed => write!(f, "one or more checks failed"),
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
