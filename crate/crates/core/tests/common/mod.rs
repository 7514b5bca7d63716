#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rlvr_core::estimators::{assign_advantages, EstimatorConfig};
use rlvr_core::policy::{GroupBatch, PolicyParams, Token, Trajectory};

pub fn random_params(v: usize, k: usize, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let theta = (0..PolicyParams::param_len(v, k)).map(|_| rng.random_range(-scale..scale)).collect();
    PolicyParams::from_theta(v, k, 0, theta).unwrap()
}

pub fn perturbed(p: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut q = p.clone();
    for x in &mut q.theta {
        *x += rng.random_range(-scale..scale);
    }
    q
}

pub fn random_tokens(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<Token> {
    (0..n).map(|_| rng.random_range(0..v as Token)).collect()
}

/// Random groups scored at `old`, with rollout log-probs perturbed by
/// `noise` (zero gives identical evaluators).
pub fn random_groups(
    old: &PolicyParams,
    n_groups: usize,
    g: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<GroupBatch> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    (0..n_groups)
        .map(|gi| {
            let prompt = random_tokens(rng.random_range(0..4), old.v, rng);
            let trajectories = (0..g)
                .map(|_| {
                    let actions = random_tokens(rng.random_range(1..7), old.v, rng);
                    let trainer = old.step_logprobs(&prompt, &actions);
                    let rollout = if noise == 0.0 {
                        trainer.clone()
                    } else {
                        trainer.iter().map(|t| (t + normal.sample(rng)).min(0.0)).collect()
                    };
                    Trajectory {
                        prompt_id: format!("g{gi}"),
                        prompt: prompt.clone(),
                        actions,
                        rollout_logprobs: rollout,
                        trainer_logprobs: trainer,
                        reward: [0.0, 0.5, 1.0][rng.random_range(0..3)],
                    }
                })
                .collect();
            GroupBatch { prompt_id: format!("g{gi}"), trajectories, advantages: Vec::new() }
        })
        .collect()
}

pub fn with_advantages(mut groups: Vec<GroupBatch>, cfg: &EstimatorConfig) -> Vec<GroupBatch> {
    assign_advantages(&mut groups, cfg.std_floor);
    groups
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|b| b.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

/// Central differences of `f` at `p` with step `h`.
pub fn central_differences(p: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.theta.len())
        .map(|i| {
            let orig = q.theta[i];
            q.theta[i] = orig + h;
            let up = f(&q);
            q.theta[i] = orig - h;
            let down = f(&q);
            q.theta[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
