use std::fmt;

use crpsrft_core::dynamics::DataError;
use crpsrft_core::evaluation::EvalError;
use crpsrft_core::model::ModelError;
use crpsrft_core::training::TrainError;

/// A failure mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Numeric(String),
    /// Exit code 4.
    Io(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", context.into()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let msg = e.to_string();
        match e {
            DataError::NonFinite { .. } => CliError::Numeric(msg),
            DataError::Io(_) | DataError::Format(_) => CliError::Io(msg),
            DataError::Unstable { .. } | DataError::InvalidSpec(_) | DataError::UnknownSystem(_) => CliError::Config(msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Poisoned(_) => CliError::Numeric(msg),
            ModelError::Io(_) | ModelError::Checkpoint(_) => CliError::Io(msg),
            ModelError::Tensor(_) | ModelError::Config(_) | ModelError::MissingNoiseBranch => CliError::Config(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Input(m) => CliError::Config(m),
        }
    }
}
