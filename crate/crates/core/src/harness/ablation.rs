//! The mismatch and curriculum ablations. Both run ordinary training jobs
//! through [`train`] and summarize their metrics logs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::MismatchConfig;

use super::metrics::MetricsRecord;
use super::train::train;
use super::{HarnessError, RunConfig};

/// Fraction of final steps that must stay collapsed.
pub const COLLAPSE_TAIL: f64 = 0.2;
/// Eval reward below this fraction of the running maximum counts as collapsed.
pub const COLLAPSE_RATIO: f64 = 0.5;

/// True when every eval in the last 20% of `total_steps` sits below half of
/// the running maximum eval pass rate.
pub fn collapse_verdict(metrics: &[MetricsRecord], total_steps: usize) -> bool {
    let tail_start = total_steps as f64 * (1.0 - COLLAPSE_TAIL);
    let mut running_max = f64::NEG_INFINITY;
    let mut tail = 0;
    for r in metrics {
        let Some(rate) = r.eval_pass_rate else { continue };
        running_max = running_max.max(rate);
        if r.step as f64 > tail_start {
            if rate >= COLLAPSE_RATIO * running_max {
                return false;
            }
            tail += 1;
        }
    }
    tail > 0
}

fn eval_series(metrics: &[MetricsRecord]) -> impl Iterator<Item = f64> + '_ {
    metrics.iter().filter_map(|r| r.eval_pass_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchArm {
    pub seed: u64,
    pub mismatch: MismatchConfig,
    /// Geo-MIS threshold; `None` when the mask is off (C = ∞).
    pub threshold: Option<f64>,
    pub collapsed: bool,
    pub peak_eval: f64,
    pub final_eval: f64,
    pub mean_masked_fraction: f64,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub arms: Vec<MismatchArm>,
}

impl MismatchReport {
    pub fn arm(&self, seed: u64, mismatch_on: bool, threshold: Option<f64>) -> Option<&MismatchArm> {
        self.arms
            .iter()
            .find(|a| a.seed == seed && a.mismatch.is_none() != mismatch_on && a.threshold == threshold)
    }

    /// Seeds where the unmasked mismatched run collapsed and the masked one
    /// did not.
    pub fn reproduced_seeds(&self, threshold: f64) -> Vec<u64> {
        let mut seeds: Vec<u64> = self.arms.iter().map(|a| a.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter(|&s| {
                let off = self.arm(s, true, None);
                let on = self.arm(s, true, Some(threshold));
                matches!((off, on), (Some(off), Some(on)) if off.collapsed && !on.collapsed)
            })
            .collect()
    }
}

/// Mismatch on/off × mask on (`threshold`) / off (C = ∞), plus any extra
/// thresholds in `sweep` with the mismatch on, for every seed. All arms of
/// a seed share the master seed, so they differ only in the factor varied.
/// `clean = false` skips the two mismatch-free arms.
pub fn run_mismatch_ablation(
    base: &RunConfig,
    mismatch: MismatchConfig,
    threshold: f64,
    sweep: &[f64],
    seeds: &[u64],
    clean: bool,
) -> Result<MismatchReport, HarnessError> {
    if mismatch.is_none() {
        return Err(HarnessError::Config("the mismatch arm needs a mismatch mode".into()));
    }
    let mut arms = Vec::new();
    for &seed in seeds {
        let mut grid = Vec::new();
        if clean {
            grid.extend([(MismatchConfig::None, None), (MismatchConfig::None, Some(threshold))]);
        }
        grid.extend([(mismatch, None), (mismatch, Some(threshold))]);
        grid.extend(sweep.iter().map(|&c| (mismatch, Some(c))));
        for (mc, c) in grid {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.mismatch = mc;
            // a collapsed arm is an outcome here, not an error
            cfg.degenerate_patience = 0;
            for s in &mut cfg.stages {
                s.estimator.mis_threshold = c.unwrap_or(f64::INFINITY);
            }
            let mask = c.map_or("unmasked".to_string(), |c| format!("c{c}"));
            let label = format!("{}-{mask}", if mc.is_none() { "clean" } else { "mismatch" });
            cfg.output_dir = base.output_dir.join(format!("seed-{seed}")).join(label);
            let total = cfg.plan()?.total_steps();
            let metrics = train(cfg)?.metrics;
            arms.push(MismatchArm {
                seed,
                mismatch: mc,
                threshold: c,
                collapsed: collapse_verdict(&metrics, total),
                peak_eval: eval_series(&metrics).fold(0.0, f64::max),
                final_eval: eval_series(&metrics).last().unwrap_or(0.0),
                mean_masked_fraction: metrics.iter().map(|r| r.masked_fraction).sum::<f64>()
                    / metrics.len().max(1) as f64,
                metrics,
            });
        }
    }
    Ok(MismatchReport { arms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumArm {
    pub seed: u64,
    /// `"curriculum"` or `"flat"`.
    pub label: String,
    pub sampled_tokens: usize,
    /// Mean response length over the steps of each stage window. The flat
    /// arm's windows are cut where the curriculum arm's cumulative sampled
    /// tokens crossed its stage boundaries.
    pub window_lengths: Vec<f64>,
    pub final_eval: f64,
    pub final_by_tier: BTreeMap<String, f64>,
    pub hard_tier_pass_rate: f64,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub hard_tier: String,
    /// Paired (curriculum, flat) arms, one pair per seed.
    pub pairs: Vec<(CurriculumArm, CurriculumArm)>,
}

impl CurriculumReport {
    /// Relative gap between the two arms' sampled tokens, per seed.
    pub fn budget_gaps(&self) -> Vec<f64> {
        self.pairs
            .iter()
            .map(|(c, f)| (c.sampled_tokens as f64 - f.sampled_tokens as f64).abs() / c.sampled_tokens as f64)
            .collect()
    }

    /// Seeds where the curriculum matches or beats the flat arm on the hard tier.
    pub fn curriculum_wins(&self) -> Vec<u64> {
        self.pairs.iter().filter(|(c, f)| c.hard_tier_pass_rate >= f.hard_tier_pass_rate).map(|(c, _)| c.seed).collect()
    }

    /// Seeds where curriculum lengths rise at every stage boundary.
    pub fn lengths_rise(&self) -> Vec<u64> {
        self.pairs
            .iter()
            .filter(|(c, _)| c.window_lengths.windows(2).all(|w| w[1] > w[0]))
            .map(|(c, _)| c.seed)
            .collect()
    }

    /// Seeds where every flat window length stays within ±10% of the first.
    pub fn flat_stagnant(&self) -> Vec<u64> {
        self.pairs
            .iter()
            .filter(|(_, f)| {
                let first = f.window_lengths[0];
                f.window_lengths.iter().all(|&l| (l - first).abs() <= 0.1 * first)
            })
            .map(|(_, f)| f.seed)
            .collect()
    }
}

/// Single-stage flattening of a curriculum: its first stage, run until the
/// given token budget is spent, evaluated at the curriculum's eval window.
pub fn flatten(curriculum: &RunConfig, budget: usize) -> RunConfig {
    let mut flat = curriculum.clone();
    let mut stage = curriculum.stages[0].clone();
    // every step samples at least one token, so the budget always binds first
    stage.steps = budget.max(1);
    flat.stages = vec![stage];
    flat.token_budget = Some(budget);
    flat.eval.window = Some(curriculum.eval_window());
    flat
}

fn summarize(
    seed: u64,
    label: &str,
    metrics: Vec<MetricsRecord>,
    boundaries: &[usize],
    hard_tier: &str,
) -> CurriculumArm {
    let mut sums = vec![(0.0, 0usize); boundaries.len() + 1];
    let mut cumulative = 0;
    for r in &metrics {
        let w = boundaries.iter().filter(|&&b| cumulative >= b).count();
        sums[w].0 += r.mean_length;
        sums[w].1 += 1;
        cumulative += r.sampled_tokens;
    }
    let last = metrics.iter().rev().find(|r| r.eval_pass_rate.is_some());
    let final_by_tier = last.and_then(|r| r.eval_by_tier.clone()).unwrap_or_default();
    CurriculumArm {
        seed,
        label: label.into(),
        sampled_tokens: cumulative,
        window_lengths: sums.iter().map(|&(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect(),
        final_eval: last.and_then(|r| r.eval_pass_rate).unwrap_or(0.0),
        hard_tier_pass_rate: final_by_tier.get(hard_tier).copied().unwrap_or(0.0),
        final_by_tier,
        metrics,
    }
}

/// Runs the staged plan in `curriculum`, then its flattening with the same
/// sampled-token budget, for every seed. The hard tier is the last eval task.
pub fn run_curriculum_ablation(curriculum: &RunConfig, seeds: &[u64]) -> Result<CurriculumReport, HarnessError> {
    let hard_tier = curriculum
        .eval
        .tasks
        .last()
        .map(|t| t.family.tier_name())
        .ok_or_else(|| HarnessError::Config("the curriculum ablation needs eval tasks".into()))?;
    let mut pairs = Vec::new();
    for &seed in seeds {
        let mut cfg = curriculum.clone();
        cfg.seed = seed;
        cfg.token_budget = None;
        cfg.degenerate_patience = 0;
        cfg.output_dir = curriculum.output_dir.join(format!("seed-{seed}")).join("curriculum");
        let staged = train(cfg.clone())?;
        let mut boundaries = Vec::new();
        let mut cumulative = 0;
        for pair in staged.metrics.windows(2) {
            cumulative += pair[0].sampled_tokens;
            if pair[1].stage != pair[0].stage {
                boundaries.push(cumulative);
            }
        }
        let mut flat = flatten(&cfg, staged.sampled_tokens);
        flat.output_dir = curriculum.output_dir.join(format!("seed-{seed}")).join("flat");
        let flat_metrics = train(flat)?.metrics;
        let staged_arm = summarize(seed, "curriculum", staged.metrics, &boundaries, &hard_tier);
        let flat_arm = summarize(seed, "flat", flat_metrics, &boundaries, &hard_tier);
        pairs.push((staged_arm, flat_arm));
    }
    Ok(CurriculumReport { hard_tier, pairs })
}
