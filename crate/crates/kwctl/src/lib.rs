//! Command-line harness around `kw-core`: dataset ingestion, config-driven
//! desk-scale training with temperature annealing, checkpoint persistence,
//! evaluation, a finite-difference gradient-check runner, and
//! attention-statistics export.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod idx;
pub mod model;
pub mod optim;
pub mod stats;
pub mod synth;
pub mod train;

use std::io;

use kw_core::planner::PlanError;
use kw_core::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Plan(#[from] PlanError),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("{path}: {msg} (at byte offset {offset})")]
    IdxFormat { path: String, offset: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Train(String),
}

impl CliError {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Resolve a spec argument: a filesystem path, or `builtin:resnet18` for the
/// bundled ResNet18 description.
pub fn read_spec_text(spec: &str) -> Result<String> {
    if spec == "builtin:resnet18" {
        return Ok(kw_core::RESNET18_SPEC_JSON.to_string());
    }
    std::fs::read_to_string(spec).map_err(|e| CliError::io(spec, e))
}
