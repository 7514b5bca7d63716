//! Rollout generation with an injectable train/inference mismatch.
//!
//! The rollout engine samples from its own evaluator, which may differ from
//! the exact trainer: logits can be rounded to fewer mantissa bits or shifted
//! by context-keyed pseudo-noise. Each sampled token is scored by both
//! evaluators. The noise is a fixed function of `(noise seed, context window,
//! token)` so re-scoring the same sequence always gives the same value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::Problem;
use crate::policy::{log_softmax, sample_from_logits, GroupBatch, PolicyError, PolicyParams, Token, Trajectory, Vocabulary};
use crate::seed;
use crate::tasks::{grade_emission, Protocol};
use crate::verifier::Verifier;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid mismatch config: {0}")]
    InvalidMismatch(String),
    #[error("group size {0} must be at least 2")]
    GroupTooSmall(usize),
    #[error("no problems to roll out")]
    NoProblems,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MismatchConfig {
    #[default]
    None,
    /// Round every logit to `bits` fraction bits.
    Quantize { bits: u32 },
    /// Add `N(0, sigma²)` noise keyed by context and token.
    LogitNoise { sigma: f64, seed: u64 },
}

impl MismatchConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        match *self {
            MismatchConfig::None => Ok(()),
            MismatchConfig::Quantize { bits } if (4..=23).contains(&bits) => Ok(()),
            MismatchConfig::Quantize { bits } => {
                Err(EngineError::InvalidMismatch(format!("quantize bits must be in 4..=23, got {bits}")))
            }
            MismatchConfig::LogitNoise { sigma, .. } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            MismatchConfig::LogitNoise { sigma, .. } => {
                Err(EngineError::InvalidMismatch(format!("sigma must be finite and >= 0, got {sigma}")))
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, MismatchConfig::None)
    }
}

/// Rounds the mantissa of `x` to `bits` fraction bits, ties to even.
pub fn quantize(x: f64, bits: u32) -> f64 {
    if !x.is_finite() || bits >= 52 {
        return x;
    }
    let shift = 52 - bits;
    let raw = x.to_bits();
    let mask = (1u64 << shift) - 1;
    let half = 1u64 << (shift - 1);
    let rem = raw & mask;
    let truncated = raw & !mask;
    let round_up = rem > half || (rem == half && (truncated >> shift) & 1 == 1);
    // a carry out of the mantissa bumps the exponent, which is the right result
    f64::from_bits(if round_up { truncated + (1u64 << shift) } else { truncated })
}

/// Logits of the rollout engine for the next token after `history`.
pub fn rollout_eval_logits(params: &PolicyParams, history: &[Token], mc: &MismatchConfig) -> Vec<f64> {
    let mut logits = params.logits(history);
    perturb(params, history, mc, &mut logits);
    logits
}

fn perturb(params: &PolicyParams, history: &[Token], mc: &MismatchConfig, logits: &mut [f64]) {
    match *mc {
        MismatchConfig::None => {}
        MismatchConfig::Quantize { bits } => {
            for x in logits.iter_mut() {
                *x = quantize(*x, bits);
            }
        }
        MismatchConfig::LogitNoise { sigma, seed: noise_seed } => {
            let mut key = vec![noise_seed, params.k as u64];
            key.extend(params.active_features(history).iter().map(|&f| f as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&key));
            for x in logits.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
    }
}

/// Per-token rollout-engine log-probabilities of `actions` (unit temperature).
pub fn rollout_step_logprobs(params: &PolicyParams, prompt: &[Token], actions: &[Token], mc: &MismatchConfig) -> Vec<f64> {
    let mut history = prompt.to_vec();
    actions
        .iter()
        .map(|&a| {
            let lp = log_softmax(&rollout_eval_logits(params, &history, mc), 1.0)[a as usize];
            history.push(a);
            lp
        })
        .collect()
}

/// Sampling settings for one wave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub group_size: usize,
    pub window: usize,
    pub temperature: f64,
    pub mismatch: MismatchConfig,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WaveStats {
    pub trajectories: usize,
    pub total_tokens: usize,
    pub mean_length: f64,
    pub max_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutWave {
    pub groups: Vec<GroupBatch>,
    pub wave_seed: u64,
    /// Checksum of the parameters that generated the wave.
    pub snapshot: String,
    pub stats: WaveStats,
}

/// Samples one response with the rollout engine and scores it with both
/// evaluators. The reward is left at 0.
pub fn sample_trajectory(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt_id: &str,
    prompt: &[Token],
    spec: &RolloutSpec,
    sample_seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut history = prompt.to_vec();
    let mut actions = Vec::new();
    let mut rollout_logprobs = Vec::new();
    while actions.len() < spec.window {
        let logits = rollout_eval_logits(params, &history, &spec.mismatch);
        let a = sample_from_logits(&logits, spec.temperature, &mut rng);
        rollout_logprobs.push(log_softmax(&logits, 1.0)[a as usize]);
        actions.push(a);
        history.push(a);
        if a == vocab.eos() {
            break;
        }
    }
    let trainer_logprobs = params.step_logprobs(prompt, &actions);
    Trajectory {
        prompt_id: prompt_id.to_string(),
        prompt: prompt.to_vec(),
        actions,
        rollout_logprobs,
        trainer_logprobs,
        reward: 0.0,
    }
}

/// `G` graded responses per problem, in problem-major, index-minor order.
/// Response `i` of a problem is seeded from `(wave seed, problem id, i)`.
pub fn generate_wave(
    params: &PolicyParams,
    vocab: &Vocabulary,
    problems: &[Problem],
    spec: &RolloutSpec,
    verifier: &Verifier,
    wave_seed: u64,
) -> Result<RolloutWave, EngineError> {
    spec.mismatch.validate()?;
    if spec.group_size < 2 {
        return Err(EngineError::GroupTooSmall(spec.group_size));
    }
    if problems.is_empty() {
        return Err(EngineError::NoProblems);
    }
    let prompts = problems
        .iter()
        .map(|p| vocab.encode(&p.prompt))
        .collect::<Result<Vec<_>, _>>()?;
    let groups: Vec<GroupBatch> = problems
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(p, prompt)| {
            let id_hash = seed::hash_str(&p.id);
            let trajectories = (0..spec.group_size)
                .into_par_iter()
                .map(|i| {
                    let s = seed::derive(&[wave_seed, id_hash, i as u64]);
                    let mut t = sample_trajectory(params, vocab, &p.id, prompt, spec, s);
                    t.reward = grade_emission(verifier, vocab, &t.actions, &p.answers, spec.protocol).aggregate;
                    t
                })
                .collect();
            GroupBatch { prompt_id: p.id.clone(), trajectories, advantages: Vec::new() }
        })
        .collect();
    let lengths = groups.iter().flat_map(|g| g.trajectories.iter().map(Trajectory::len));
    let (count, total, max) = lengths.fold((0, 0, 0), |(c, t, m), l| (c + 1, t + l, m.max(l)));
    Ok(RolloutWave {
        groups,
        wave_seed,
        snapshot: params.checksum(),
        stats: WaveStats { trajectories: count, total_tokens: total, mean_length: total as f64 / count as f64, max_length: max },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_keeps_representable_values() {
        for x in [1.0, -0.5, 0.15625, 3.0e5_f32 as f64, 1.1f32 as f64] {
            assert_eq!(quantize(x, 23), x);
        }
        assert_eq!(quantize(0.0, 8), 0.0);
        // 1 + 2^-10 rounds away at 8 bits, stays at 12
        let x = 1.0 + 2f64.powi(-10);
        assert_eq!(quantize(x, 8), 1.0);
        assert_eq!(quantize(x, 12), x);
        // tie to even: 1 + 2^-9 at 8 bits sits halfway between 1 and 1 + 2^-8
        assert_eq!(quantize(1.0 + 2f64.powi(-9), 8), 1.0);
        assert_eq!(quantize(1.0 + 3.0 * 2f64.powi(-9), 8), 1.0 + 2f64.powi(-7));
    }

    #[test]
    fn mismatch_validation() {
        assert!(MismatchConfig::Quantize { bits: 3 }.validate().is_err());
        assert!(MismatchConfig::Quantize { bits: 23 }.validate().is_ok());
        assert!(MismatchConfig::LogitNoise { sigma: -0.1, seed: 0 }.validate().is_err());
    }
}
