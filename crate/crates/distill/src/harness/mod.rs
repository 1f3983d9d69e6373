//! Experiment presets, training loop, evaluation, and metrics logging.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod runner;

pub use config::{Preset, ResolvedConfig, RunConfig};
pub use eval::{evaluate, generate, standardize_answer, EvalScores, StandardizedAnswer};
pub use metrics::{EvalRecord, MetricsLog, StepRecord};
pub use optim::{Adam, AdamConfig};
pub use runner::{load_datasets, run_experiment, train_teacher, Datasets, RunArtifacts};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step} in term {term:?}")]
    NonFiniteLoss { step: usize, term: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
