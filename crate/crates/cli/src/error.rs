use std::fmt::Display;
use std::path::Path;

use perimotion::flow::FlowError;
use perimotion::metrics::MetricsError;
use perimotion::training::TrainingError;
use perimotion::volume::VolumeError;
use thiserror::Error;

/// Failure classes with their process exit codes: usage 2, data 3,
/// numerical 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// A data error that names the file it came from.
    pub fn file(path: &Path, err: impl Display) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::UnknownKey(_) | TrainingError::ConfigValue { .. } | TrainingError::ConfigSyntax { .. } => {
                CliError::Usage(e.to_string())
            }
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFiniteVelocity { .. } => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Flow(f) => f.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
