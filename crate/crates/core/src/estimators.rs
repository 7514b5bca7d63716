//! Sequence-level clipped surrogate with group-standardized advantages, and
//! its masked importance-sampling variant for rollout/trainer mismatch.
//!
//! For a group of `G` responses to one prompt, `Â_i = (R_i - mean)/std` with
//! the population std (all zeros below `std_floor`). The sequence ratio is
//! `ρ_i = exp(mean_t(log π_new - log π_old))` and the objective is the mean
//! over groups of `(1/G) Σ_i min(ρ_i Â_i, clip(ρ_i, 1-ε, 1+ε) Â_i)`.
//!
//! The masked variant first rejects responses whose geometric-mean
//! trainer/rollout weight exceeds `C`, then multiplies each kept term by the
//! full trainer/rollout product `ρ(τ)` (optional). Advantages always come
//! from the full group, and `1/G` keeps counting masked responses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{GroupBatch, PolicyParams, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimatorError {
    #[error("group {group} has {size} responses; at least 2 are required")]
    GroupTooSmall { group: usize, size: usize },
    #[error("group {group} has {advantages} advantages for {size} responses")]
    AdvantagesMissing { group: usize, advantages: usize, size: usize },
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Clip range `ε`.
    pub clip_eps: f64,
    /// Mask threshold `C` on the geometric-mean mismatch weight; `inf` disables masking.
    pub mis_threshold: f64,
    /// Advantages are all zero when the group's reward std is below this.
    pub std_floor: f64,
    /// Multiply kept terms by the full trainer/rollout product.
    pub mis_multiplier: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { clip_eps: 0.2, mis_threshold: 1.5, std_floor: 1e-6, mis_multiplier: true }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.clip_eps > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!("clip_eps must be > 0, got {}", self.clip_eps)));
        }
        if !(self.mis_threshold >= 1.0) {
            return Err(EstimatorError::InvalidConfig(format!("mis_threshold must be >= 1, got {}", self.mis_threshold)));
        }
        if !(self.std_floor > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!("std_floor must be > 0, got {}", self.std_floor)));
        }
        Ok(())
    }
}

/// Per-response values behind one step's estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDiagnostics {
    pub ratio: f64,
    pub advantage: f64,
    pub geo_weight: f64,
    pub kept: bool,
    /// The clipped branch was selected by the min.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub kept_count: usize,
    pub masked_count: usize,
    /// Every group had zero reward variance; the gradient is zero.
    pub degenerate: bool,
    pub diagnostics: Vec<TrajectoryDiagnostics>,
}

impl GradientEstimate {
    pub fn grad_norm(&self) -> f64 {
        crate::policy::l2_norm(&self.gradient)
    }

    pub fn masked_fraction(&self) -> f64 {
        fraction(self.masked_count, self.kept_count + self.masked_count)
    }

    pub fn clip_fraction(&self) -> f64 {
        let clipped = self.diagnostics.iter().filter(|d| d.kept && d.clipped).count();
        fraction(clipped, self.kept_count)
    }

    pub fn mean_geo_weight(&self) -> f64 {
        if self.diagnostics.is_empty() {
            return 0.0;
        }
        self.diagnostics.iter().map(|d| d.geo_weight).sum::<f64>() / self.diagnostics.len() as f64
    }

    pub fn max_geo_weight(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.geo_weight).fold(0.0, f64::max)
    }
}

fn fraction(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group-standardized advantages with population std.
pub fn group_advantage(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    assert!(rewards.len() >= 2, "group needs at least 2 rewards");
    let (mean, std) = mean_and_std(rewards);
    if std < std_floor {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Fills every group's advantages from its rewards.
pub fn assign_advantages(groups: &mut [GroupBatch], std_floor: f64) {
    for g in groups {
        g.advantages = group_advantage(&g.rewards(), std_floor);
    }
}

/// Length-normalized sequence ratio between two parameter settings, both
/// scored by the exact evaluator.
pub fn sequence_ratio(traj: &Trajectory, new: &PolicyParams, old: &PolicyParams) -> f64 {
    let lp_new = new.sequence_logprob(&traj.prompt, &traj.actions);
    let lp_old = old.sequence_logprob(&traj.prompt, &traj.actions);
    ((lp_new - lp_old) / traj.len() as f64).exp()
}

fn log_mismatch(traj: &Trajectory) -> f64 {
    traj.trainer_logprobs.iter().zip(&traj.rollout_logprobs).map(|(t, r)| t - r).sum()
}

/// Geometric mean of per-token trainer/rollout probability ratios.
pub fn geo_mismatch_weight(traj: &Trajectory) -> f64 {
    (log_mismatch(traj) / traj.len() as f64).exp()
}

/// Full trainer/rollout probability ratio of the sequence.
pub fn mismatch_product(traj: &Trajectory) -> f64 {
    log_mismatch(traj).exp()
}

/// True when the response is kept under threshold `c`.
pub fn geo_mis_mask(traj: &Trajectory, c: f64) -> bool {
    geo_mismatch_weight(traj) <= c
}

pub fn gspo_objective(
    groups: &[GroupBatch],
    new: &PolicyParams,
    old: &PolicyParams,
    cfg: &EstimatorConfig,
) -> Result<GradientEstimate, EstimatorError> {
    estimate(groups, new, old, cfg, false)
}

pub fn gspo_mis_gradient(
    groups: &[GroupBatch],
    new: &PolicyParams,
    old: &PolicyParams,
    cfg: &EstimatorConfig,
) -> Result<GradientEstimate, EstimatorError> {
    estimate(groups, new, old, cfg, true)
}

struct GroupTerm {
    objective: f64,
    gradient: Vec<f64>,
    diagnostics: Vec<TrajectoryDiagnostics>,
}

fn estimate(
    groups: &[GroupBatch],
    new: &PolicyParams,
    old: &PolicyParams,
    cfg: &EstimatorConfig,
    masked: bool,
) -> Result<GradientEstimate, EstimatorError> {
    cfg.validate()?;
    for (i, g) in groups.iter().enumerate() {
        let size = g.trajectories.len();
        if size < 2 {
            return Err(EstimatorError::GroupTooSmall { group: i, size });
        }
        if g.advantages.len() != size {
            return Err(EstimatorError::AdvantagesMissing { group: i, advantages: g.advantages.len(), size });
        }
    }
    let degenerate = groups.iter().all(|g| mean_and_std(&g.rewards()).1 < cfg.std_floor);
    let n_groups = groups.len().max(1) as f64;
    let terms: Vec<GroupTerm> = groups
        .par_iter()
        .map(|g| group_term(g, new, old, cfg, masked, n_groups))
        .collect();

    let mut out = GradientEstimate {
        objective: 0.0,
        gradient: vec![0.0; new.theta.len()],
        kept_count: 0,
        masked_count: 0,
        degenerate,
        diagnostics: Vec::new(),
    };
    for term in terms {
        out.objective += term.objective;
        if !degenerate {
            for (acc, x) in out.gradient.iter_mut().zip(&term.gradient) {
                *acc += x;
            }
        }
        for d in &term.diagnostics {
            if d.kept {
                out.kept_count += 1;
            } else {
                out.masked_count += 1;
            }
        }
        out.diagnostics.extend(term.diagnostics);
    }
    Ok(out)
}

fn group_term(
    g: &GroupBatch,
    new: &PolicyParams,
    old: &PolicyParams,
    cfg: &EstimatorConfig,
    masked: bool,
    n_groups: f64,
) -> GroupTerm {
    let size = g.trajectories.len() as f64;
    let mut term = GroupTerm { objective: 0.0, gradient: vec![0.0; new.theta.len()], diagnostics: Vec::new() };
    for (traj, &adv) in g.trajectories.iter().zip(&g.advantages) {
        let geo_weight = geo_mismatch_weight(traj);
        let kept = !masked || geo_weight <= cfg.mis_threshold;
        let ratio = sequence_ratio(traj, new, old);
        let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let (unclipped, clipped) = (ratio * adv, clipped_ratio * adv);
        let use_clipped = clipped < unclipped;
        term.diagnostics.push(TrajectoryDiagnostics { ratio, advantage: adv, geo_weight, kept, clipped: use_clipped });
        if !kept || adv == 0.0 {
            continue;
        }
        let weight = if masked && cfg.mis_multiplier { mismatch_product(traj) } else { 1.0 };
        let scale = weight / (size * n_groups);
        term.objective += scale * if use_clipped { clipped } else { unclipped };
        if !use_clipped {
            let grad_scale = scale * adv * ratio / traj.len() as f64;
            new.accumulate_grad(&traj.prompt, &traj.actions, grad_scale, &mut term.gradient);
        }
    }
    term
}
