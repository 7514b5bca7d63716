//! Pass-rate difficulty, dual-end filtering and the staged schedule.
//!
//! A problem's difficulty `D` is the fraction of `N` sampled responses that
//! the rule-based verifier grades fully correct. Each stage keeps problems
//! whose `D` lies in its band: too-easy problems are pruned, zero-pass
//! problems go through a recovery step, and later stages tighten the band
//! while widening the group size and generation window.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::EstimatorConfig;
use crate::expr::parse_expression;
use crate::policy::{PolicyParams, Vocabulary};
use crate::seed;
use crate::tasks::{grade_emission, Protocol};
use crate::verifier::Verifier;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurriculumError {
    #[error("problem {0} has no difficulty estimate")]
    MissingDifficulty(String),
    #[error("problem {id}: {reason}")]
    InvalidProblem { id: String, reason: String },
    #[error("invalid band {0:?}: expected e.g. \"(0.0,0.7]\" with 0 <= lower <= upper <= 1")]
    InvalidBand(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SyntheticTier,
    Recovered,
    Original,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    /// Prompt as vocabulary symbols.
    pub prompt: Vec<String>,
    /// Ordered gold answers.
    pub answers: Vec<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    #[serde(default = "default_provenance")]
    pub provenance: Provenance,
}

fn default_provenance() -> Provenance {
    Provenance::Original
}

impl Problem {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        let invalid = |reason: String| CurriculumError::InvalidProblem { id: self.id.clone(), reason };
        if self.answers.is_empty() {
            return Err(invalid("no gold answers".into()));
        }
        for a in &self.answers {
            parse_expression(a).map_err(|e| invalid(format!("gold {a:?} does not parse: {e}")))?;
        }
        if let Some(d) = self.difficulty {
            if !(0.0..=1.0).contains(&d) {
                return Err(invalid(format!("difficulty {d} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Difficulty interval with open or closed ends, written `(0.0,0.7]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Band {
    pub lower: f64,
    pub upper: f64,
    pub lower_closed: bool,
    pub upper_closed: bool,
}

impl Band {
    pub fn new(lower: f64, upper: f64, lower_closed: bool, upper_closed: bool) -> Self {
        Self { lower, upper, lower_closed, upper_closed }
    }

    pub fn contains(&self, d: f64) -> bool {
        let above = if self.lower_closed { d >= self.lower } else { d > self.lower };
        let below = if self.upper_closed { d <= self.upper } else { d < self.upper };
        above && below
    }

    /// `d` lies beyond the upper end.
    pub fn is_above(&self, d: f64) -> bool {
        d > self.upper || (d == self.upper && !self.upper_closed)
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.lower) && (0.0..=1.0).contains(&self.upper) && self.lower <= self.upper
    }
}

impl FromStr for Band {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || CurriculumError::InvalidBand(s.to_string());
        let t = s.trim();
        let lower_closed = match t.chars().next() {
            Some('[') => true,
            Some('(') => false,
            _ => return Err(err()),
        };
        let upper_closed = match t.chars().last() {
            Some(']') => true,
            Some(')') => false,
            _ => return Err(err()),
        };
        let (lo, hi) = t[1..t.len() - 1].split_once(',').ok_or_else(err)?;
        let lower: f64 = lo.trim().parse().map_err(|_| err())?;
        let upper: f64 = hi.trim().parse().map_err(|_| err())?;
        let band = Band::new(lower, upper, lower_closed, upper_closed);
        if !band.is_valid() {
            return Err(err());
        }
        Ok(band)
    }
}

impl TryFrom<String> for Band {
    type Error = CurriculumError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Band> for String {
    fn from(b: Band) -> String {
        b.to_string()
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{:?},{:?}{}",
            if self.lower_closed { '[' } else { '(' },
            self.lower,
            self.upper,
            if self.upper_closed { ']' } else { ')' }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyConfig {
    /// Rollouts per problem `N`.
    pub rollouts: usize,
    /// Count a rollout as a pass when its reward reaches this value instead
    /// of requiring full credit.
    pub pass_threshold: Option<f64>,
    pub temperature: f64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self { rollouts: 16, pass_threshold: None, temperature: 1.0 }
    }
}

/// Everything needed to sample and grade responses for estimation.
#[derive(Clone, Copy)]
pub struct Estimator<'a> {
    pub params: &'a PolicyParams,
    pub vocab: &'a Vocabulary,
    pub verifier: &'a Verifier<'a>,
    pub protocol: Protocol,
    pub config: DifficultyConfig,
    pub window: usize,
    pub seed: u64,
}

impl Estimator<'_> {
    /// Pass rate over `N` rollouts seeded from `(seed, problem id, k)`.
    pub fn estimate(&self, p: &Problem) -> Result<f64, crate::policy::PolicyError> {
        let n = self.config.rollouts;
        assert!(n >= 1, "difficulty needs at least one rollout");
        let prompt = self.vocab.encode(&p.prompt)?;
        let id_hash = seed::hash_str(&p.id);
        let passes = (0..n)
            .filter(|&k| {
                let s = seed::derive(&[self.seed, id_hash, k as u64]);
                let actions = self.params.sample(&prompt, self.window, s, self.config.temperature, self.vocab);
                let r = grade_emission(self.verifier, self.vocab, &actions, &p.answers, self.protocol).aggregate;
                match self.config.pass_threshold {
                    Some(t) => r >= t,
                    None => r == 1.0,
                }
            })
            .count();
        Ok(passes as f64 / n as f64)
    }

    /// Estimates every problem in parallel; order is preserved.
    pub fn annotate(&self, problems: &[Problem]) -> Result<Vec<Problem>, crate::policy::PolicyError> {
        problems
            .par_iter()
            .map(|p| {
                let d = self.estimate(p)?;
                Ok(Problem { difficulty: Some(d), ..p.clone() })
            })
            .collect()
    }
}

/// Repair step for problems no rollout solved.
pub trait ProblemRefiner: Sync {
    /// The gold answers match the question.
    fn check_alignment(&self, p: &Problem) -> bool;
    /// The question carries everything needed to answer it.
    fn check_completeness(&self, p: &Problem) -> bool;
    /// A reworded problem, or `None` if it cannot be repaired.
    fn refine_description(&self, p: &Problem) -> Option<Problem>;

    fn refine(&self, p: &Problem) -> Option<Problem> {
        if !self.check_alignment(p) || !self.check_completeness(p) {
            return None;
        }
        self.refine_description(p)
    }
}

pub const FORMAT_HINT_TAG: &str = "format-hint";

/// Rule-based refiner for synthetic tasks: accepts problems whose prompt is
/// in the vocabulary and whose golds parse, and re-emits them tagged with a
/// format hint under a fresh id.
pub struct FormatHintRefiner {
    pub vocab: Vocabulary,
}

impl ProblemRefiner for FormatHintRefiner {
    fn check_alignment(&self, p: &Problem) -> bool {
        !p.answers.is_empty() && p.answers.iter().all(|a| parse_expression(a).is_ok())
    }

    fn check_completeness(&self, p: &Problem) -> bool {
        !p.prompt.is_empty() && self.vocab.encode(&p.prompt).is_ok()
    }

    fn refine_description(&self, p: &Problem) -> Option<Problem> {
        if p.tags.iter().any(|t| t == FORMAT_HINT_TAG) {
            return None;
        }
        let mut tags = p.tags.clone();
        tags.push(FORMAT_HINT_TAG.to_string());
        Some(Problem {
            id: format!("{}~hint", p.id),
            tags,
            difficulty: None,
            provenance: Provenance::Recovered,
            ..p.clone()
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<Problem>,
    pub pruned_trivial: Vec<Problem>,
    pub recovered: Vec<Problem>,
    pub discarded: Vec<Problem>,
}

impl FilterOutcome {
    /// Problems to train on: kept plus recovered.
    pub fn active(&self) -> Vec<Problem> {
        self.kept.iter().chain(&self.recovered).cloned().collect()
    }
}

/// Splits annotated problems by `band`. Zero-pass problems are offered to
/// `refiner`; repaired ones are re-scored with `reestimate` and classified
/// again. Without a refiner, or when repair fails, a zero-pass problem is
/// kept only if the band contains 0.
pub fn dual_end_filter(
    problems: &[Problem],
    band: Band,
    refiner: Option<&dyn ProblemRefiner>,
    reestimate: &(dyn Fn(&Problem) -> f64 + Sync),
) -> Result<FilterOutcome, CurriculumError> {
    let mut out = FilterOutcome::default();
    for p in problems {
        let d = p.difficulty.ok_or_else(|| CurriculumError::MissingDifficulty(p.id.clone()))?;
        if band.is_above(d) {
            out.pruned_trivial.push(p.clone());
        } else if d == 0.0 {
            match refiner.and_then(|r| r.refine(p)) {
                Some(repaired) => {
                    let d2 = reestimate(&repaired);
                    let repaired = Problem { difficulty: Some(d2), ..repaired };
                    if band.is_above(d2) {
                        out.pruned_trivial.push(repaired);
                    } else if band.contains(d2) {
                        out.recovered.push(repaired);
                    } else {
                        out.discarded.push(repaired);
                    }
                }
                None if band.contains(0.0) => out.kept.push(p.clone()),
                None => out.discarded.push(p.clone()),
            }
        } else if band.contains(d) {
            out.kept.push(p.clone());
        } else {
            out.discarded.push(p.clone());
        }
    }
    Ok(out)
}

/// One training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub band: Band,
    pub group_size: usize,
    /// Generation window in tokens.
    pub window: usize,
    pub learning_rate: f64,
    /// Responses sampled per step (a whole number of groups).
    pub rollout_batch: usize,
    /// Responses used for the update (a whole number of groups).
    pub update_batch: usize,
    /// Optimizer steps before promotion.
    pub steps: usize,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

impl StageConfig {
    pub fn exploration(&self) -> usize {
        self.group_size * self.window
    }

    pub fn prompts_per_step(&self) -> usize {
        self.rollout_batch / self.group_size
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("plan has no stages")]
    Empty,
    #[error("stage {stage}: band {band} must lie within [0, 1]")]
    BandOutOfRange { stage: usize, band: String },
    #[error("stage {stage}: group size {group_size} must be at least 2")]
    GroupTooSmall { stage: usize, group_size: usize },
    #[error("stage {stage}: generation window must be at least 1")]
    WindowZero { stage: usize },
    #[error("stage {stage}: step budget must be at least 1")]
    NoSteps { stage: usize },
    #[error("stage {stage}: update batch {update} exceeds rollout batch {rollout}")]
    UpdateExceedsRollout { stage: usize, update: usize, rollout: usize },
    #[error("stage {stage}: batch {batch} is not a positive multiple of group size {group_size}")]
    BatchNotWholeGroups { stage: usize, batch: usize, group_size: usize },
    #[error("stage {stage}: learning rate {lr} must be finite and non-negative")]
    InvalidLearningRate { stage: usize, lr: f64 },
    #[error("stage {stage}: estimator config: {reason}")]
    InvalidEstimator { stage: usize, reason: String },
    #[error("difficulty must tighten: stage {stage} upper bound {upper} exceeds previous {previous}")]
    DifficultyNotTightening { stage: usize, previous: f64, upper: f64 },
    #[error("exploration must expand: stage {stage} has G*W = {current}, previous {previous}")]
    ExplorationShrinks { stage: usize, previous: usize, current: usize },
}

/// Validated stage sequence; stages advance after their step budgets and
/// difficulty is re-estimated at every stage start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<StageConfig>,
}

impl CurriculumPlan {
    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

fn validate_stage(i: usize, s: &StageConfig) -> Result<(), PlanError> {
    if !s.band.is_valid() {
        return Err(PlanError::BandOutOfRange { stage: i, band: s.band.to_string() });
    }
    if s.group_size < 2 {
        return Err(PlanError::GroupTooSmall { stage: i, group_size: s.group_size });
    }
    if s.window == 0 {
        return Err(PlanError::WindowZero { stage: i });
    }
    if s.steps == 0 {
        return Err(PlanError::NoSteps { stage: i });
    }
    for batch in [s.rollout_batch, s.update_batch] {
        if batch == 0 || batch % s.group_size != 0 {
            return Err(PlanError::BatchNotWholeGroups { stage: i, batch, group_size: s.group_size });
        }
    }
    if s.update_batch > s.rollout_batch {
        return Err(PlanError::UpdateExceedsRollout { stage: i, update: s.update_batch, rollout: s.rollout_batch });
    }
    if !(s.learning_rate.is_finite() && s.learning_rate >= 0.0) {
        return Err(PlanError::InvalidLearningRate { stage: i, lr: s.learning_rate });
    }
    s.estimator
        .validate()
        .map_err(|e| PlanError::InvalidEstimator { stage: i, reason: e.to_string() })
}

pub fn build_plan(raw: Vec<StageConfig>) -> Result<CurriculumPlan, PlanError> {
    if raw.is_empty() {
        return Err(PlanError::Empty);
    }
    for (i, s) in raw.iter().enumerate() {
        validate_stage(i, s)?;
        if i > 0 {
            let prev = &raw[i - 1];
            if s.band.upper > prev.band.upper {
                return Err(PlanError::DifficultyNotTightening { stage: i, previous: prev.band.upper, upper: s.band.upper });
            }
            if s.exploration() < prev.exploration() {
                return Err(PlanError::ExplorationShrinks {
                    stage: i,
                    previous: prev.exploration(),
                    current: s.exploration(),
                });
            }
        }
    }
    Ok(CurriculumPlan { stages: raw })
}

/// Position in a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainingState {
    pub stage: usize,
    /// Steps completed in the current stage.
    pub stage_step: usize,
    /// Steps completed overall.
    pub global_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTransition {
    /// Keep training in the current stage.
    Continue,
    /// Budget spent; move to this stage (re-estimate and re-filter first).
    Promote(usize),
    Done,
}

pub fn advance_stage(state: &TrainingState, plan: &CurriculumPlan) -> StageTransition {
    let Some(stage) = plan.stages.get(state.stage) else {
        return StageTransition::Done;
    };
    if state.stage_step < stage.steps {
        StageTransition::Continue
    } else if state.stage + 1 < plan.stages.len() {
        StageTransition::Promote(state.stage + 1)
    } else {
        StageTransition::Done
    }
}

/// Learning rate of the reference large-model schedule; the desk plan uses
/// [`DESK_LEARNING_RATE`] for the small linear policy.
pub const REFERENCE_LEARNING_RATE: f64 = 1e-6;
pub const DESK_LEARNING_RATE: f64 = 1e-2;
/// Rollouts per problem in the reference schedule; desk default is 16.
pub const REFERENCE_ROLLOUTS: usize = 72;

/// Three-stage schedule with bands `(0,0.7]`, `(0,0.5]`, `[0,0.5]`, group
/// sizes 8, 8, 16 and windows 16, 24, 32.
pub fn reference_plan(steps_per_stage: usize) -> Vec<StageConfig> {
    let stage = |band: &str, group_size, window, rollout_batch, update_batch| StageConfig {
        band: band.parse().expect("valid band literal"),
        group_size,
        window,
        learning_rate: DESK_LEARNING_RATE,
        rollout_batch,
        update_batch,
        steps: steps_per_stage,
        estimator: EstimatorConfig::default(),
    };
    vec![
        stage("(0.0,0.7]", 8, 16, 128, 64),
        stage("(0.0,0.5]", 8, 24, 64, 32),
        stage("[0.0,0.5]", 16, 32, 64, 32),
    ]
}
