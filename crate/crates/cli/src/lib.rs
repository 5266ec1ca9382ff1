//! Config, checkpoint and command implementations behind the `radious` binary.

use std::path::{Path, PathBuf};

use radious_core::datakit::DataError;
use radious_core::metrics::MetricsError;
use radious_core::ModelError;
use thiserror::Error;

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sample {id}: {source}")]
    Sample { id: String, source: ModelError },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Input(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Stable machine-readable code printed as `error[CODE]`.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Data(_) => "data",
            Self::Model(ModelError::Capacity { .. }) | Self::Sample { source: ModelError::Capacity { .. }, .. } => "capacity",
            Self::Model(_) | Self::Sample { .. } => "model",
            Self::Metrics(MetricsError::DegenerateEvaluation) => "degenerate-evaluation",
            Self::Metrics(MetricsError::Naming(_) | MetricsError::TooFewReports(_) | MetricsError::Report { .. }) => "input",
            Self::Metrics(_) => "metrics",
            Self::Checkpoint(_) => "checkpoint",
            Self::Input(_) => "input",
            Self::Io { .. } => "io",
        }
    }

    /// One line, suitable for stderr: `error[code]: message`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.code())
    }
}
