use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    advance_stage, dual_end_filter, CurriculumPlan, Estimator, FormatHintRefiner, Problem, ProblemRefiner,
    StageConfig, StageTransition, TrainingState,
};
use crate::engine::{generate_wave, sample_trajectory, RolloutSpec};
use crate::estimators::{assign_advantages, gspo_mis_gradient};
use crate::policy::{GroupBatch, PolicyCheckpoint, PolicyParams, Vocabulary};
use crate::seed;
use crate::tasks::{generate_dataset, grade_emission, task_vocabulary};
use crate::verifier::Verifier;

use super::metrics::MetricsRecord;
use super::replay::WaveDump;
use super::{read_jsonl, write_jsonl, HarnessError, RunConfig};

pub const TRAIN_CHECKPOINT_FORMAT: &str = "rlvr-train/v1";

// Domain tags keep the seed streams of different consumers apart.
const TAG_STAGE: u64 = 1;
const TAG_SELECT: u64 = 2;
const TAG_WAVE: u64 = 3;

/// Policy plus loop position, written at every stage boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format: String,
    pub policy: PolicyCheckpoint,
    pub state: TrainingState,
    /// Response tokens sampled for training so far.
    pub sampled_tokens: usize,
    pub degenerate_streak: usize,
}

impl TrainCheckpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Data {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?;
        if ckpt.format != TRAIN_CHECKPOINT_FORMAT {
            return Err(HarnessError::Config(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub state: TrainingState,
    pub sampled_tokens: usize,
    pub metrics: Vec<MetricsRecord>,
    /// Stage-boundary checkpoints written by this run, in order.
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

pub fn load_dataset(path: &Path) -> Result<Vec<Problem>, HarnessError> {
    let problems: Vec<Problem> = read_jsonl(path)?;
    for p in &problems {
        p.validate()?;
    }
    Ok(problems)
}

pub fn write_dataset(path: &Path, problems: &[Problem]) -> Result<(), HarnessError> {
    write_jsonl(path, problems)
}

/// Stage-boundary checkpoint path after `completed` stages.
pub fn checkpoint_path(dir: &Path, completed: usize) -> PathBuf {
    dir.join(format!("stage-{completed}.ckpt.json"))
}

/// Where a run with wave dumps keeps the θ that generated each wave.
pub fn snapshot_path(dir: &Path, checksum: &str) -> PathBuf {
    dir.join("snapshots").join(format!("{checksum}.json"))
}

/// The staged training loop.
pub struct Trainer {
    cfg: RunConfig,
    plan: CurriculumPlan,
    vocab: Vocabulary,
    pool: Vec<Problem>,
    eval_set: Vec<Problem>,
    params: PolicyParams,
    state: TrainingState,
    sampled_tokens: usize,
    degenerate_streak: usize,
    active: Option<Vec<Problem>>,
}

impl Trainer {
    /// Fresh run: loads problems and the initial policy.
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let plan = cfg.plan()?;
        let (vocab, params) = match &cfg.init_checkpoint {
            Some(path) => {
                let ckpt = PolicyCheckpoint::load(path)?;
                let params = ckpt.validate()?;
                if params.k != cfg.policy.k {
                    return Err(HarnessError::Config(format!(
                        "policy.k = {} but {} has k = {}",
                        cfg.policy.k,
                        path.display(),
                        params.k
                    )));
                }
                (ckpt.vocabulary, params)
            }
            None => {
                let vocab = task_vocabulary();
                let params = PolicyParams::zeros(vocab.len(), cfg.policy.k, vocab.bos());
                (vocab, params)
            }
        };
        let pool = match &cfg.dataset {
            Some(path) => load_dataset(path)?,
            None => generate_all(&cfg.tasks)?,
        };
        let eval_set = generate_all(&cfg.eval.tasks)?;
        for p in pool.iter().chain(&eval_set) {
            vocab.encode(&p.prompt)?;
        }
        Ok(Self {
            cfg,
            plan,
            vocab,
            pool,
            eval_set,
            params,
            state: TrainingState::default(),
            sampled_tokens: 0,
            degenerate_streak: 0,
            active: None,
        })
    }

    /// Continues a run from a stage-boundary checkpoint.
    pub fn resume(cfg: RunConfig, checkpoint: &Path) -> Result<Self, HarnessError> {
        let ckpt = TrainCheckpoint::load(checkpoint)?;
        let mut trainer = Self::new(cfg)?;
        trainer.params = ckpt.policy.validate()?;
        trainer.vocab = ckpt.policy.vocabulary;
        trainer.state = ckpt.state;
        trainer.sampled_tokens = ckpt.sampled_tokens;
        trainer.degenerate_streak = ckpt.degenerate_streak;
        Ok(trainer)
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn state(&self) -> TrainingState {
        self.state
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Runs to the end of the plan or the token budget.
    pub fn run(mut self) -> Result<TrainOutcome, HarnessError> {
        let dir = self.cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        let metrics_path = dir.join("metrics.jsonl");
        let waves_path = dir.join("waves.jsonl");
        if self.cfg.dump_waves {
            let snapshots = dir.join("snapshots");
            std::fs::create_dir_all(&snapshots).map_err(|e| HarnessError::io(&snapshots, e))?;
        }
        let mut metrics = self.reset_log::<MetricsRecord>(&metrics_path, |r| r.step)?;
        let mut waves = match self.cfg.dump_waves {
            true => Some(self.reset_log::<WaveDump>(&waves_path, |r| r.step)?),
            false => None,
        };
        let mut records = Vec::new();
        let mut checkpoints = Vec::new();
        loop {
            if self.budget_spent() {
                break;
            }
            match advance_stage(&self.state, &self.plan) {
                StageTransition::Continue => {}
                StageTransition::Promote(next) => {
                    self.state = TrainingState { stage: next, stage_step: 0, ..self.state };
                    self.active = None;
                    checkpoints.push(self.save_checkpoint(next)?);
                    continue;
                }
                StageTransition::Done => {
                    if self.state.stage_step > 0 {
                        self.state = TrainingState { stage: self.plan.stages.len(), stage_step: 0, ..self.state };
                        checkpoints.push(self.save_checkpoint(self.plan.stages.len())?);
                    }
                    break;
                }
            }
            if self.active.is_none() {
                self.active = Some(self.prepare_stage()?);
            }
            let (record, dump) = self.step()?;
            append_line(&mut metrics, &metrics_path, &record)?;
            if let Some(file) = waves.as_mut() {
                for d in &dump {
                    append_line(file, &waves_path, d)?;
                }
            }
            records.push(record);
        }
        let final_path = dir.join("policy.json");
        PolicyCheckpoint::new(&self.vocab, &self.params).save(&final_path)?;
        Ok(TrainOutcome {
            params: self.params,
            state: self.state,
            sampled_tokens: self.sampled_tokens,
            metrics: records,
            checkpoints,
            metrics_path,
        })
    }

    fn budget_spent(&self) -> bool {
        self.cfg.token_budget.is_some_and(|b| self.sampled_tokens >= b)
    }

    /// Opens an append-only log, dropping records past the current step so a
    /// resumed run continues the log cleanly.
    fn reset_log<T: Serialize + serde::de::DeserializeOwned>(
        &self,
        path: &Path,
        step_of: impl Fn(&T) -> usize,
    ) -> Result<File, HarnessError> {
        let kept: Vec<T> = match self.state.global_step {
            0 => Vec::new(),
            done if path.exists() => read_jsonl::<T>(path)?.into_iter().filter(|r| step_of(r) <= done).collect(),
            _ => Vec::new(),
        };
        write_jsonl(path, &kept)?;
        OpenOptions::new().append(true).open(path).map_err(|e| HarnessError::io(path, e))
    }

    fn save_checkpoint(&self, completed: usize) -> Result<PathBuf, HarnessError> {
        let path = checkpoint_path(&self.cfg.output_dir, completed);
        TrainCheckpoint {
            format: TRAIN_CHECKPOINT_FORMAT.into(),
            policy: PolicyCheckpoint::new(&self.vocab, &self.params),
            state: self.state,
            sampled_tokens: self.sampled_tokens,
            degenerate_streak: self.degenerate_streak,
        }
        .save(&path)?;
        Ok(path)
    }
}

fn generate_all(specs: &[crate::tasks::TaskSpec]) -> Result<Vec<Problem>, HarnessError> {
    let mut out = Vec::new();
    for spec in specs {
        out.extend(generate_dataset(spec)?);
    }
    Ok(out)
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, record: &T) -> Result<(), HarnessError> {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

impl Trainer {
    fn stage(&self) -> &StageConfig {
        &self.plan.stages[self.state.stage]
    }

    fn verifier(&self) -> Verifier<'static> {
        Verifier::default()
    }

    /// Re-estimates the whole pool under the current θ and filters it to the
    /// stage band.
    fn prepare_stage(&self) -> Result<Vec<Problem>, HarnessError> {
        let stage = self.stage();
        let verifier = self.verifier();
        let estimator = Estimator {
            params: &self.params,
            vocab: &self.vocab,
            verifier: &verifier,
            protocol: self.cfg.protocol,
            config: self.cfg.difficulty,
            window: stage.window,
            seed: seed::derive(&[self.cfg.seed, TAG_STAGE, self.state.stage as u64]),
        };
        let annotated = estimator.annotate(&self.pool)?;
        let refiner = FormatHintRefiner { vocab: self.vocab.clone() };
        let refiner: Option<&dyn ProblemRefiner> = if self.cfg.refiner { Some(&refiner) } else { None };
        let reestimate = |p: &Problem| estimator.estimate(p).expect("refined prompts stay in the vocabulary");
        let active = dual_end_filter(&annotated, stage.band, refiner, &reestimate)?.active();
        if active.is_empty() {
            return Err(HarnessError::NoActiveProblems { stage: self.state.stage });
        }
        Ok(active)
    }

    /// One optimizer step: wave, subsample, estimate, ascend, log.
    fn step(&mut self) -> Result<(MetricsRecord, Vec<WaveDump>), HarnessError> {
        let stage = self.stage().clone();
        let step = self.state.global_step;
        let active = self.active.as_ref().expect("stage prepared");
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(&[self.cfg.seed, TAG_SELECT, step as u64])));
        let chosen: Vec<Problem> =
            order.iter().take(stage.prompts_per_step()).map(|&i| active[i].clone()).collect();
        let spec = RolloutSpec {
            group_size: stage.group_size,
            window: stage.window,
            temperature: self.cfg.policy.train_temperature,
            mismatch: self.cfg.mismatch,
            protocol: self.cfg.protocol,
        };
        let verifier = self.verifier();
        let wave_seed = seed::derive(&[self.cfg.seed, TAG_WAVE, step as u64]);
        let wave = generate_wave(&self.params, &self.vocab, &chosen, &spec, &verifier, wave_seed)?;
        let mean_reward = wave.groups.iter().flat_map(|g| g.trajectories.iter().map(|t| t.reward)).sum::<f64>()
            / wave.stats.trajectories as f64;

        let picked = subsample(wave.groups.len(), stage.update_batch / stage.group_size);
        let mut groups: Vec<GroupBatch> = picked.iter().map(|&i| wave.groups[i].clone()).collect();
        assign_advantages(&mut groups, stage.estimator.std_floor);
        let estimate = gspo_mis_gradient(&groups, &self.params, &self.params, &stage.estimator)?;

        let dump = if self.cfg.dump_waves {
            let golds: BTreeMap<&str, &Vec<String>> = chosen.iter().map(|p| (p.id.as_str(), &p.answers)).collect();
            let path = snapshot_path(&self.cfg.output_dir, &wave.snapshot);
            if !path.exists() {
                PolicyCheckpoint::new(&self.vocab, &self.params).save(&path)?;
            }
            WaveDump::from_groups(step + 1, &wave.snapshot, &groups, &golds, &self.vocab)
        } else {
            Vec::new()
        };

        for (t, g) in self.params.theta.iter_mut().zip(&estimate.gradient) {
            *t += stage.learning_rate * g;
        }
        self.degenerate_streak = if estimate.degenerate { self.degenerate_streak + 1 } else { 0 };
        let patience = self.cfg.degenerate_patience;
        if patience > 0 && self.degenerate_streak >= patience {
            return Err(HarnessError::DegenerateAbort { steps: self.degenerate_streak, step: step + 1 });
        }
        self.state.stage_step += 1;
        self.state.global_step += 1;
        self.sampled_tokens += wave.stats.total_tokens;

        let last = self.state.global_step == self.plan.total_steps() || self.budget_spent();
        let (eval_pass_rate, eval_by_tier) =
            if !self.eval_set.is_empty() && (self.state.global_step % self.cfg.eval.every == 0 || last) {
                let (overall, tiers) = self.evaluate();
                (Some(overall), Some(tiers))
            } else {
                (None, None)
            };
        let record = MetricsRecord {
            step: self.state.global_step,
            stage: self.state.stage,
            mean_reward,
            mean_length: wave.stats.mean_length,
            max_length: wave.stats.max_length,
            window: stage.window,
            sampled_tokens: wave.stats.total_tokens,
            active_problems: active.len(),
            objective: estimate.objective,
            grad_norm: estimate.grad_norm(),
            masked_fraction: estimate.masked_fraction(),
            clip_fraction: estimate.clip_fraction(),
            mean_geo_weight: estimate.mean_geo_weight(),
            max_geo_weight: estimate.max_geo_weight(),
            degenerate: estimate.degenerate,
            eval_pass_rate,
            eval_by_tier,
            theta_checksum: self.params.checksum(),
        };
        Ok((record, dump))
    }

    /// Full-credit rate of the rollout engine at eval temperature, overall
    /// and per tier (first tag). Seeds depend only on the eval seed and the
    /// problem, so every eval sees the same noise.
    pub fn evaluate(&self) -> (f64, BTreeMap<String, f64>) {
        evaluate(&self.params, &self.vocab, &self.eval_set, &self.cfg)
    }
}

/// `k` of `n` indices spread evenly; all of them when `k >= n`.
fn subsample(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

pub(crate) fn evaluate(
    params: &PolicyParams,
    vocab: &Vocabulary,
    problems: &[Problem],
    cfg: &RunConfig,
) -> (f64, BTreeMap<String, f64>) {
    let verifier = Verifier::default();
    let spec = RolloutSpec {
        group_size: cfg.eval.samples,
        window: cfg.eval_window(),
        temperature: cfg.policy.eval_temperature,
        mismatch: cfg.mismatch,
        protocol: cfg.protocol,
    };
    let passes: Vec<usize> = problems
        .par_iter()
        .map(|p| {
            let prompt = vocab.encode(&p.prompt).expect("eval prompts checked at load");
            let id_hash = seed::hash_str(&p.id);
            (0..spec.group_size)
                .filter(|&j| {
                    let s = seed::derive(&[cfg.eval_seed, id_hash, j as u64]);
                    let t = sample_trajectory(params, vocab, &p.id, &prompt, &spec, s);
                    grade_emission(&verifier, vocab, &t.actions, &p.answers, spec.protocol).aggregate == 1.0
                })
                .count()
        })
        .collect();
    let mut tiers: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, &n) in problems.iter().zip(&passes) {
        let tier = p.tags.first().cloned().unwrap_or_default();
        let e = tiers.entry(tier).or_default();
        e.0 += n;
        e.1 += spec.group_size;
    }
    let total: usize = passes.iter().sum();
    let overall = total as f64 / (problems.len() * spec.group_size) as f64;
    (overall, tiers.into_iter().map(|(k, (n, d))| (k, n as f64 / d as f64)).collect())
}

/// Runs `cfg` from scratch.
pub fn train(cfg: RunConfig) -> Result<TrainOutcome, HarnessError> {
    Trainer::new(cfg)?.run()
}
