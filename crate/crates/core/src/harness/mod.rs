//! Configuration, the staged training loop, metrics, replay and the two
//! ablation experiments.

mod ablation;
mod config;
mod metrics;
mod replay;
mod train;

pub use ablation::{
    collapse_verdict, run_curriculum_ablation, run_mismatch_ablation, CurriculumArm, CurriculumReport,
    MismatchArm, MismatchReport,
};
pub use config::{EvalConfig, PolicyConfig, RunConfig, OUTPUT_DIR_ENV};
pub use metrics::{read_metrics, MetricsRecord};
pub use replay::{read_wave_dump, replay, WaveDump};
pub use train::{
    checkpoint_path, load_dataset, snapshot_path, train, write_dataset, TrainCheckpoint, TrainOutcome, Trainer,
};

use crate::curriculum::{CurriculumError, PlanError};
use crate::engine::EngineError;
use crate::estimators::EstimatorError;
use crate::policy::PolicyError;
use crate::tasks::TaskError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("stage {stage}: no problems left after filtering")]
    NoActiveProblems { stage: usize },
    #[error("every group was degenerate for {steps} consecutive steps (last step {step}); check the difficulty band")]
    DegenerateAbort { steps: usize, step: usize },
    #[error("parameter checksum {actual} does not match the dump snapshot {expected}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("{path}: line {line}: {message}")]
    Data { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    /// Stable machine-readable class for CLI error reports.
    pub fn class(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Plan(_) => "plan-invalid",
            HarnessError::Task(_) => "invalid-spec",
            HarnessError::Curriculum(_) => "curriculum",
            HarnessError::Engine(_) => "engine",
            HarnessError::Estimator(_) => "estimator",
            HarnessError::Policy(_) => "policy",
            HarnessError::NoActiveProblems { .. } => "no-active-problems",
            HarnessError::DegenerateAbort { .. } => "degenerate-batch",
            HarnessError::ChecksumMismatch { .. } => "checksum-mismatch",
            HarnessError::Data { .. } => "data",
            HarnessError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}

/// Reads a JSON-lines file into records.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Data {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes records as JSON lines, replacing the file.
pub fn write_jsonl<T: serde::Serialize>(path: &std::path::Path, records: &[T]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}
