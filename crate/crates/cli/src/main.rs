//! `rlvr` command-line front end. Every subcommand reads and writes JSON
//! lines; failures print `{"error": class, "message": ...}` to stderr and
//! exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rlvr_core::curriculum::{
    dual_end_filter, Band, DifficultyConfig, Estimator, FormatHintRefiner, Problem, ProblemRefiner,
};
use rlvr_core::engine::MismatchConfig;
use rlvr_core::estimators::{EstimatorConfig, GradientEstimate};
use rlvr_core::harness::{
    load_dataset, read_wave_dump, replay, run_curriculum_ablation, run_mismatch_ablation, snapshot_path,
    write_dataset, HarnessError, RunConfig, Trainer,
};
use rlvr_core::policy::{PolicyCheckpoint, PolicyParams, Vocabulary};
use rlvr_core::tasks::{generate_dataset, task_vocabulary, tier_ladder, Protocol, TaskSpec};
use rlvr_core::verifier::Verifier;
use serde_json::json;

#[derive(Parser)]
#[command(name = "rlvr", version, about = "Desk-scale RL from verifiable rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic problems from a TOML list of `[[tasks]]`.
    GenTasks {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reject the list unless uniform-policy pass rates strictly fall at this window.
        #[arg(long)]
        ladder_window: Option<usize>,
    },
    /// Annotate problems with pass-rate difficulty under a policy.
    EstimateDifficulty {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        estimate: EstimateArgs,
    },
    /// Split annotated problems by a difficulty band.
    Filter {
        #[arg(long)]
        dataset: PathBuf,
        /// Band such as "(0.0,0.7]".
        #[arg(long)]
        band: String,
        /// Problems to train on (kept plus recovered).
        #[arg(long)]
        out: PathBuf,
        /// Full four-way partition as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Offer zero-pass problems to the format-hint refiner.
        #[arg(long)]
        refine: bool,
        #[command(flatten)]
        estimate: EstimateArgs,
    },
    /// Grade a prediction or a boxed completion against gold answers.
    Verify {
        #[arg(long, required = true)]
        gold: Vec<String>,
        #[arg(long, conflicts_with = "completion")]
        pred: Option<String>,
        #[arg(long)]
        completion: Option<String>,
    },
    /// Run the staged training loop.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a stage-boundary checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mismatch on/off × Geo-MIS mask on/off.
    AblateMismatch {
        #[arg(long)]
        config: PathBuf,
        /// Logit-noise standard deviation.
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, default_value_t = 1.5)]
        threshold: f64,
        /// Extra thresholds to sweep with the mismatch on.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Skip the two mismatch-free arms.
        #[arg(long)]
        no_clean: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Staged curriculum vs its single-stage flattening at equal token budget.
    AblateCurriculum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute one dumped update batch.
    Replay {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        step: usize,
        /// Policy checkpoint; defaults to the run's snapshot for the wave.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        clip_eps: f64,
        /// Geo-MIS threshold; omit for C = ∞.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_parser = parse_protocol, default_value = "raw-tokens")]
        protocol: Protocol,
    },
}

#[derive(Args)]
struct EstimateArgs {
    /// Policy checkpoint; a zero policy with `--k` when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    rollouts: usize,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_protocol, default_value = "raw-tokens")]
    protocol: Protocol,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    match s {
        "raw-tokens" => Ok(Protocol::RawTokens),
        "boxed-text" => Ok(Protocol::BoxedText),
        _ => Err(format!("unknown protocol {s:?}; use raw-tokens or boxed-text")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.class(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskList {
    tasks: Vec<TaskSpec>,
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e })
}

fn write_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match out {
        Some(path) => std::fs::write(path, text + "\n")
            .map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_policy(path: Option<&Path>, k: usize) -> Result<(Vocabulary, PolicyParams), HarnessError> {
    match path {
        Some(p) => {
            let ckpt = PolicyCheckpoint::load(p)?;
            let params = ckpt.validate()?;
            Ok((ckpt.vocabulary, params))
        }
        None => {
            if k == 0 {
                return Err(HarnessError::Config("--k must be at least 1".into()));
            }
            let vocab = task_vocabulary();
            let params = PolicyParams::zeros(vocab.len(), k, vocab.bos());
            Ok((vocab, params))
        }
    }
}

fn summary(e: &GradientEstimate) -> serde_json::Value {
    json!({
        "objective": e.objective,
        "grad_norm": e.grad_norm(),
        "masked_fraction": e.masked_fraction(),
        "clip_fraction": e.clip_fraction(),
        "mean_geo_weight": e.mean_geo_weight(),
        "max_geo_weight": e.max_geo_weight(),
        "kept": e.kept_count,
        "masked": e.masked_count,
        "degenerate": e.degenerate,
    })
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::GenTasks { tasks, out, ladder_window } => {
            let list: TaskList =
                toml::from_str(&read_text(&tasks)?).map_err(|e| HarnessError::Config(e.to_string()))?;
            if let Some(w) = ladder_window {
                tier_ladder(&list.tasks, w)?;
            }
            let mut problems = Vec::new();
            for spec in &list.tasks {
                problems.extend(generate_dataset(spec)?);
            }
            write_dataset(&out, &problems)
        }
        Command::EstimateDifficulty { dataset, out, estimate } => {
            let problems = load_dataset(&dataset)?;
            let (vocab, params) = load_policy(estimate.policy.as_deref(), estimate.k)?;
            let verifier = Verifier::default();
            let est = estimator(&estimate, &params, &vocab, &verifier)?;
            write_dataset(&out, &est.annotate(&problems)?)
        }
        Command::Filter { dataset, band, out, report, refine, estimate } => {
            let band: Band = band.parse()?;
            let problems = load_dataset(&dataset)?;
            let (vocab, params) = load_policy(estimate.policy.as_deref(), estimate.k)?;
            let verifier = Verifier::default();
            let est = estimator(&estimate, &params, &vocab, &verifier)?;
            let refiner = FormatHintRefiner { vocab: vocab.clone() };
            let refiner: Option<&dyn ProblemRefiner> = if refine { Some(&refiner) } else { None };
            let reestimate = |p: &Problem| est.estimate(p).unwrap_or(0.0);
            let outcome = dual_end_filter(&problems, band, refiner, &reestimate)?;
            write_dataset(&out, &outcome.active())?;
            match report {
                Some(path) => write_json(Some(&path), &outcome),
                None => Ok(()),
            }
        }
        Command::Verify { gold, pred, completion } => {
            let verifier = Verifier::default();
            let report = match (pred, completion) {
                (Some(p), None) => verifier.grade_answers(&[p], &gold),
                (None, Some(c)) => verifier.grade_trajectory(&c, &gold),
                _ => return Err(HarnessError::Config("give --pred or --completion".into())),
            };
            write_json(None, &report)
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let trainer = match resume {
                Some(ckpt) => Trainer::resume(cfg, &ckpt)?,
                None => Trainer::new(cfg)?,
            };
            let outcome = trainer.run()?;
            let last = outcome.metrics.iter().rev().find_map(|r| r.eval_pass_rate);
            write_json(
                None,
                &json!({
                    "steps": outcome.state.global_step,
                    "sampled_tokens": outcome.sampled_tokens,
                    "theta_checksum": outcome.params.checksum(),
                    "final_eval_pass_rate": last,
                    "metrics": outcome.metrics_path,
                    "checkpoints": outcome.checkpoints,
                }),
            )
        }
        Command::AblateMismatch { config, sigma, noise_seed, threshold, sweep, seeds, no_clean, out } => {
            let cfg = RunConfig::load(&config)?;
            let mismatch = MismatchConfig::LogitNoise { sigma, seed: noise_seed };
            let report = run_mismatch_ablation(&cfg, mismatch, threshold, &sweep, &seeds, !no_clean)?;
            let arms: Vec<_> = report
                .arms
                .iter()
                .map(|a| {
                    json!({
                        "seed": a.seed,
                        "mismatch": !a.mismatch.is_none(),
                        "threshold": a.threshold,
                        "collapsed": a.collapsed,
                        "peak_eval": a.peak_eval,
                        "final_eval": a.final_eval,
                        "mean_masked_fraction": a.mean_masked_fraction,
                    })
                })
                .collect();
            write_json(out.as_deref(), &json!({ "arms": arms, "reproduced_seeds": report.reproduced_seeds(threshold) }))
        }
        Command::AblateCurriculum { config, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_curriculum_ablation(&cfg, &seeds)?;
            let arm = |a: &rlvr_core::harness::CurriculumArm| {
                json!({
                    "sampled_tokens": a.sampled_tokens,
                    "window_lengths": a.window_lengths,
                    "final_eval": a.final_eval,
                    "final_by_tier": a.final_by_tier,
                    "hard_tier_pass_rate": a.hard_tier_pass_rate,
                })
            };
            let pairs: Vec<_> = report
                .pairs
                .iter()
                .map(|(c, f)| json!({ "seed": c.seed, "curriculum": arm(c), "flat": arm(f) }))
                .collect();
            write_json(
                out.as_deref(),
                &json!({
                    "hard_tier": report.hard_tier,
                    "pairs": pairs,
                    "budget_gaps": report.budget_gaps(),
                    "curriculum_wins": report.curriculum_wins(),
                    "lengths_rise": report.lengths_rise(),
                    "flat_stagnant": report.flat_stagnant(),
                }),
            )
        }
        Command::Replay { dump, step, policy, clip_eps, threshold, protocol } => {
            let records = read_wave_dump(&dump, Some(step))?;
            let first = records
                .first()
                .ok_or_else(|| HarnessError::Config(format!("no dumped trajectories for step {step}")))?;
            let path = match policy {
                Some(p) => p,
                None => snapshot_path(dump.parent().unwrap_or(Path::new(".")), &first.snapshot),
            };
            let ckpt = PolicyCheckpoint::load(&path)?;
            let params = ckpt.validate()?;
            let cfg = EstimatorConfig {
                clip_eps,
                mis_threshold: threshold.unwrap_or(f64::INFINITY),
                ..EstimatorConfig::default()
            };
            let estimate = replay(&records, &params, &ckpt.vocabulary, &cfg, protocol)?;
            write_json(None, &summary(&estimate))
        }
    }
}

fn estimator<'a>(
    args: &EstimateArgs,
    params: &'a PolicyParams,
    vocab: &'a Vocabulary,
    verifier: &'a Verifier<'a>,
) -> Result<Estimator<'a>, HarnessError> {
    if args.rollouts == 0 || args.window == 0 || !(args.temperature > 0.0) {
        return Err(HarnessError::Config("rollouts, window and temperature must be positive".into()));
    }
    Ok(Estimator {
        params,
        vocab,
        verifier,
        protocol: args.protocol,
        config: DifficultyConfig { rollouts: args.rollouts, temperature: args.temperature, ..Default::default() },
        window: args.window,
        seed: args.seed,
    })
}
