use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{build_plan, CurriculumPlan, DifficultyConfig, StageConfig};
use crate::engine::MismatchConfig;
use crate::tasks::{Protocol, TaskSpec};

use super::HarnessError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "RLVR_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Context length in tokens.
    pub k: usize,
    pub train_temperature: f64,
    pub eval_temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { k: 3, train_temperature: 1.0, eval_temperature: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate after every this many optimizer steps (and after the last).
    pub every: usize,
    /// Samples per eval problem.
    pub samples: usize,
    /// Generation window for eval; defaults to the largest stage window.
    pub window: Option<usize>,
    pub tasks: Vec<TaskSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 10, samples: 4, window: None, tasks: Vec::new() }
    }
}

/// Everything a training run needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub eval_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Training problems are generated from these specs ...
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    /// ... or read from this JSONL dataset.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub mismatch: MismatchConfig,
    #[serde(default)]
    pub difficulty: DifficultyConfig,
    #[serde(default)]
    pub protocol: Protocol,
    /// Run zero-pass problems through the format-hint refiner.
    #[serde(default = "default_true")]
    pub refiner: bool,
    /// Abort after this many consecutive all-degenerate steps; 0 disables.
    #[serde(default = "default_patience")]
    pub degenerate_patience: usize,
    /// Stop once this many response tokens have been sampled.
    #[serde(default)]
    pub token_budget: Option<usize>,
    /// Write every update batch to `waves.jsonl` for replay.
    #[serde(default)]
    pub dump_waves: bool,
    pub stages: Vec<StageConfig>,
}

fn default_true() -> bool {
    true
}

fn default_patience() -> usize {
    50
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads, applies the output-dir override and validates.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn plan(&self) -> Result<CurriculumPlan, HarnessError> {
        Ok(build_plan(self.stages.clone())?)
    }

    pub fn eval_window(&self) -> usize {
        self.eval.window.unwrap_or_else(|| self.stages.iter().map(|s| s.window).max().unwrap_or(1))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.plan()?;
        self.mismatch.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.tasks.is_empty() == self.dataset.is_none() {
            return Err(HarnessError::Config("give exactly one of `tasks` or `dataset`".into()));
        }
        for path in self.dataset.iter().chain(&self.init_checkpoint) {
            if !path.exists() {
                return Err(HarnessError::Config(format!("{} does not exist", path.display())));
            }
        }
        for spec in self.tasks.iter().chain(&self.eval.tasks) {
            spec.family.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.policy.k == 0 {
            return Err(HarnessError::Config("policy.k must be at least 1".into()));
        }
        if !(self.policy.train_temperature > 0.0 && self.policy.eval_temperature > 0.0) {
            return Err(HarnessError::Config("temperatures must be positive".into()));
        }
        if self.difficulty.rollouts == 0 {
            return Err(HarnessError::Config("difficulty.rollouts must be at least 1".into()));
        }
        if !self.eval.tasks.is_empty() && (self.eval.every == 0 || self.eval.samples == 0) {
            return Err(HarnessError::Config("eval.every and eval.samples must be at least 1".into()));
        }
        Ok(())
    }
}
