use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::estimators::{assign_advantages, gspo_mis_gradient, EstimatorConfig, GradientEstimate};
use crate::policy::{GroupBatch, PolicyParams, Trajectory, Vocabulary};
use crate::tasks::{grade_emission, Protocol};
use crate::verifier::Verifier;

use super::{read_jsonl, HarnessError};

/// One trajectory of an update batch, as written to `waves.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveDump {
    /// Optimizer step this batch fed (1-based, as in the metrics log).
    pub step: usize,
    /// Checksum of the θ that generated the wave.
    pub snapshot: String,
    /// Group position within the update batch.
    pub group: usize,
    /// Trajectory position within its group.
    pub index: usize,
    pub problem_id: String,
    pub prompt: Vec<String>,
    pub answers: Vec<String>,
    pub tokens: Vec<String>,
    pub rollout_logprobs: Vec<f64>,
    pub trainer_logprobs: Vec<f64>,
    pub reward: f64,
}

impl WaveDump {
    pub(crate) fn from_groups(
        step: usize,
        snapshot: &str,
        groups: &[GroupBatch],
        golds: &BTreeMap<&str, &Vec<String>>,
        vocab: &Vocabulary,
    ) -> Vec<Self> {
        let mut out = Vec::new();
        for (group, g) in groups.iter().enumerate() {
            for (index, t) in g.trajectories.iter().enumerate() {
                out.push(WaveDump {
                    step,
                    snapshot: snapshot.to_string(),
                    group,
                    index,
                    problem_id: t.prompt_id.clone(),
                    prompt: vocab.decode(&t.prompt),
                    answers: golds.get(t.prompt_id.as_str()).map(|a| a.to_vec()).unwrap_or_default(),
                    tokens: vocab.decode(&t.actions),
                    rollout_logprobs: t.rollout_logprobs.clone(),
                    trainer_logprobs: t.trainer_logprobs.clone(),
                    reward: t.reward,
                });
            }
        }
        out
    }
}

/// Dump records, restricted to one step when `step` is given.
pub fn read_wave_dump(path: &Path, step: Option<usize>) -> Result<Vec<WaveDump>, HarnessError> {
    let records: Vec<WaveDump> = read_jsonl(path)?;
    Ok(records.into_iter().filter(|r| step.is_none_or(|s| r.step == s)).collect())
}

/// Re-grades, re-standardizes and re-estimates one dumped update batch.
/// Records may arrive in any order; they are sorted by (group, index).
pub fn replay(
    records: &[WaveDump],
    params: &PolicyParams,
    vocab: &Vocabulary,
    cfg: &EstimatorConfig,
    protocol: Protocol,
) -> Result<GradientEstimate, HarnessError> {
    let checksum = params.checksum();
    if let Some(r) = records.iter().find(|r| r.snapshot != checksum) {
        return Err(HarnessError::ChecksumMismatch { expected: r.snapshot.clone(), actual: checksum });
    }
    if let Some(step) = records.first().map(|r| r.step) {
        if records.iter().any(|r| r.step != step) {
            return Err(HarnessError::Config("replay needs the records of a single step".into()));
        }
    }
    let mut sorted: Vec<&WaveDump> = records.iter().collect();
    sorted.sort_by_key(|r| (r.group, r.index));
    let verifier = Verifier::default();
    let mut groups: Vec<GroupBatch> = Vec::new();
    let mut current = None;
    for r in sorted {
        let actions = vocab.encode(&r.tokens)?;
        let traj = Trajectory {
            prompt_id: r.problem_id.clone(),
            prompt: vocab.encode(&r.prompt)?,
            reward: grade_emission(&verifier, vocab, &actions, &r.answers, protocol).aggregate,
            actions,
            rollout_logprobs: r.rollout_logprobs.clone(),
            trainer_logprobs: r.trainer_logprobs.clone(),
        };
        if current != Some(r.group) {
            current = Some(r.group);
            groups.push(GroupBatch { prompt_id: r.problem_id.clone(), trajectories: Vec::new(), advantages: Vec::new() });
        }
        groups.last_mut().expect("group pushed").trajectories.push(traj);
    }
    assign_advantages(&mut groups, cfg.std_floor);
    Ok(gspo_mis_gradient(&groups, params, params, cfg)?)
}
