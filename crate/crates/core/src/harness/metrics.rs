use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, HarnessError};

/// One line of `metrics.jsonl`, written after every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: usize,
    /// Mean reward over the whole rollout wave.
    pub mean_reward: f64,
    pub mean_length: f64,
    pub max_length: usize,
    /// Generation window in force.
    pub window: usize,
    /// Response tokens sampled this step.
    pub sampled_tokens: usize,
    /// Problems that survived the stage filter.
    pub active_problems: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub masked_fraction: f64,
    pub clip_fraction: f64,
    pub mean_geo_weight: f64,
    pub max_geo_weight: f64,
    pub degenerate: bool,
    /// Fraction of eval samples with full credit, on eval steps.
    pub eval_pass_rate: Option<f64>,
    /// Eval pass rate per task tier.
    pub eval_by_tier: Option<BTreeMap<String, f64>>,
    /// Checksum of θ after the update.
    pub theta_checksum: String,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    read_jsonl(path)
}
