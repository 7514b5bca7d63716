use std::path::Path;

use rlvr_core::curriculum::{Band, StageConfig};
use rlvr_core::engine::MismatchConfig;
use rlvr_core::estimators::EstimatorConfig;
use rlvr_core::harness::*;
use rlvr_core::policy::PolicyCheckpoint;
use rlvr_core::tasks::{task_vocabulary, Family, Protocol, TaskSpec};

const COPY: Family = Family::DigitReverse { length: 1 };

fn stage(band: &str, group_size: usize, window: usize, steps: usize, lr: f64) -> StageConfig {
    StageConfig {
        band: band.parse::<Band>().unwrap(),
        group_size,
        window,
        learning_rate: lr,
        rollout_batch: group_size * 8,
        update_batch: group_size * 4,
        steps,
        estimator: EstimatorConfig::default(),
    }
}

fn config(dir: &Path, families: &[Family], stages: Vec<StageConfig>) -> RunConfig {
    let tasks = |seed| families.iter().map(|&family| TaskSpec { family, count: 40, seed }).collect::<Vec<_>>();
    RunConfig {
        seed: 3,
        eval_seed: 11,
        output_dir: dir.to_path_buf(),
        policy: PolicyConfig::default(),
        tasks: tasks(1),
        dataset: None,
        init_checkpoint: None,
        eval: EvalConfig { every: 5, samples: 4, window: None, tasks: tasks(2) },
        mismatch: MismatchConfig::None,
        difficulty: Default::default(),
        protocol: Protocol::RawTokens,
        refiner: true,
        degenerate_patience: 0,
        token_budget: None,
        dump_waves: false,
        stages,
    }
}

fn two_stage(dir: &Path) -> RunConfig {
    let mut cfg = config(
        dir,
        &[COPY, Family::ModularAdd { operand_digits: 1, modulus: 10 }],
        vec![stage("[0.0,1.0]", 4, 4, 12, 3.0), stage("[0.0,1.0]", 4, 6, 12, 3.0)],
    );
    cfg.mismatch = MismatchConfig::LogitNoise { sigma: 0.2, seed: 4 };
    cfg.dump_waves = true;
    cfg
}

#[test]
fn zero_learning_rate_keeps_theta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[COPY], vec![stage("[0.0,1.0]", 4, 4, 15, 0.0)]);
    let out = train(cfg).unwrap();
    assert_eq!(out.metrics.len(), 15);
    let zero = rlvr_core::policy::PolicyParams::zeros(16, 3, 0).checksum();
    assert!(out.metrics.iter().all(|r| r.theta_checksum == zero));
}

#[test]
fn easy_tier_beats_untrained_baseline() {
    let window = 4;
    let baseline = COPY.uniform_pass_rate(task_vocabulary().len(), window);
    let mut total = 0.0;
    for seed in 1..=5 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), &[COPY], vec![stage("[0.0,1.0]", 8, window, 500, 2.0)]);
        cfg.seed = seed;
        cfg.eval.every = 500;
        let out = train(cfg).unwrap();
        total += out.metrics.last().unwrap().eval_pass_rate.unwrap();
    }
    let mean = total / 5.0;
    assert!(mean > baseline, "trained {mean} vs baseline {baseline}");
}

#[test]
fn metrics_and_checkpoints_follow_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(two_stage(dir.path())).unwrap();
    let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=24).collect::<Vec<_>>());
    assert_eq!(read_metrics(&out.metrics_path).unwrap(), out.metrics);
    assert_eq!(out.checkpoints, vec![checkpoint_path(dir.path(), 1), checkpoint_path(dir.path(), 2)]);
    assert!(!checkpoint_path(dir.path(), 0).exists());
    let windows: Vec<usize> = out.metrics.iter().map(|r| r.window).collect();
    assert_eq!(windows, [vec![4; 12], vec![6; 12]].concat());
    for r in &out.metrics {
        assert_eq!(r.eval_pass_rate.is_some(), r.step % 5 == 0 || r.step == 24, "step {}", r.step);
    }
    let ckpt = TrainCheckpoint::load(&checkpoint_path(dir.path(), 1)).unwrap();
    assert_eq!((ckpt.state.stage, ckpt.state.stage_step, ckpt.state.global_step), (1, 0, 12));
    assert_eq!(ckpt.policy.validate().unwrap().checksum(), out.metrics[11].theta_checksum);
}

#[test]
fn identical_configs_give_identical_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(two_stage(a.path())).unwrap();
    let rb = train(two_stage(b.path())).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
}

#[test]
fn resume_reproduces_the_rest_of_the_run() {
    let full = tempfile::tempdir().unwrap();
    let original = train(two_stage(full.path())).unwrap();
    let resumed_dir = tempfile::tempdir().unwrap();
    let trainer = Trainer::resume(two_stage(resumed_dir.path()), &checkpoint_path(full.path(), 1)).unwrap();
    assert_eq!(trainer.state().global_step, 12);
    let resumed = trainer.run().unwrap();
    assert_eq!(resumed.metrics, original.metrics[12..]);
    assert_eq!(resumed.params, original.params);

    // resuming in place truncates the log and rewrites the same tail
    let trainer = Trainer::resume(two_stage(full.path()), &checkpoint_path(full.path(), 1)).unwrap();
    trainer.run().unwrap();
    assert_eq!(read_metrics(&full.path().join("metrics.jsonl")).unwrap(), original.metrics);
}

#[test]
fn replay_matches_logged_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_stage(dir.path());
    let out = train(cfg.clone()).unwrap();
    let waves = dir.path().join("waves.jsonl");
    for r in &out.metrics {
        let records = read_wave_dump(&waves, Some(r.step)).unwrap();
        let ckpt = PolicyCheckpoint::load(&snapshot_path(dir.path(), &records[0].snapshot)).unwrap();
        let params = ckpt.validate().unwrap();
        let est = replay(&records, &params, &ckpt.vocabulary, &cfg.stages[r.stage].estimator, cfg.protocol).unwrap();
        assert_eq!(est.objective.to_bits(), r.objective.to_bits(), "step {}", r.step);
        assert_eq!(est.grad_norm().to_bits(), r.grad_norm.to_bits(), "step {}", r.step);
        assert_eq!(est.masked_fraction(), r.masked_fraction);

        let mut shuffled = records.clone();
        shuffled.reverse();
        shuffled.rotate_left(records.len() / 3);
        let again = replay(&shuffled, &params, &ckpt.vocabulary, &cfg.stages[r.stage].estimator, cfg.protocol).unwrap();
        assert_eq!(again, est);

        let mut previous = f64::INFINITY;
        for c in [1.0, 1.05, 1.2, 1.5, 3.0, f64::INFINITY] {
            let ecfg = EstimatorConfig { mis_threshold: c, ..EstimatorConfig::default() };
            let m = replay(&records, &params, &ckpt.vocabulary, &ecfg, cfg.protocol).unwrap().masked_fraction();
            assert!(m <= previous, "C = {c}");
            previous = m;
        }
    }
}

#[test]
fn replay_rejects_the_wrong_theta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_stage(dir.path());
    train(cfg.clone()).unwrap();
    let records = read_wave_dump(&dir.path().join("waves.jsonl"), Some(24)).unwrap();
    let vocab = task_vocabulary();
    let wrong = rlvr_core::policy::PolicyParams::zeros(16, 3, 0);
    let err = replay(&records, &wrong, &vocab, &EstimatorConfig::default(), cfg.protocol).unwrap_err();
    assert!(matches!(err, HarnessError::ChecksumMismatch { .. }));
    assert_eq!(err.class(), "checksum-mismatch");
}

#[test]
fn vacuous_threshold_matches_mask_off() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut off = two_stage(a.path());
    let mut huge = two_stage(b.path());
    for s in &mut off.stages {
        s.estimator.mis_threshold = f64::INFINITY;
    }
    for s in &mut huge.stages {
        s.estimator.mis_threshold = 1e300;
    }
    off.dump_waves = false;
    huge.dump_waves = false;
    assert_eq!(train(off).unwrap().metrics, train(huge).unwrap().metrics);
}

#[test]
fn all_degenerate_steps_abort() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[Family::DigitReverse { length: 6 }], vec![stage("[0.0,1.0]", 4, 8, 40, 1.0)]);
    cfg.degenerate_patience = 5;
    let err = train(cfg).unwrap_err();
    assert!(matches!(err, HarnessError::DegenerateAbort { steps: 5, step: 5 }), "{err}");
}

#[test]
fn empty_stage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[Family::DigitReverse { length: 6 }], vec![stage("(0.0,0.7]", 4, 8, 5, 1.0)]);
    cfg.refiner = false;
    assert!(matches!(train(cfg).unwrap_err(), HarnessError::NoActiveProblems { stage: 0 }));
}

#[test]
fn token_budget_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[COPY], vec![stage("[0.0,1.0]", 4, 4, 1000, 1.0)]);
    cfg.token_budget = Some(500);
    let out = train(cfg).unwrap();
    let total: usize = out.metrics.iter().map(|r| r.sampled_tokens).sum();
    assert_eq!(total, out.sampled_tokens);
    assert!(total >= 500 && total - out.metrics.last().unwrap().sampled_tokens < 500);
    assert!(out.metrics.last().unwrap().eval_pass_rate.is_some());
}

#[test]
fn config_toml_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_stage(dir.path());
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    cfg.validate().unwrap();

    let mut both = cfg.clone();
    both.dataset = Some(dir.path().join("missing.jsonl"));
    assert!(matches!(both.validate(), Err(HarnessError::Config(_))));

    let mut missing = cfg.clone();
    missing.init_checkpoint = Some(dir.path().join("nope.json"));
    assert!(missing.validate().unwrap_err().to_string().contains("does not exist"));

    let mut shrinking = cfg.clone();
    shrinking.stages[1].window = 2;
    assert_eq!(shrinking.validate().unwrap_err().class(), "plan-invalid");

    assert!(RunConfig::from_toml(&text.replace("eval_seed", "eval_sead")).is_err());
}

#[test]
fn collapse_verdict_definition() {
    let record = |step, eval: Option<f64>| MetricsRecord {
        step,
        stage: 0,
        mean_reward: 0.0,
        mean_length: 1.0,
        max_length: 1,
        window: 4,
        sampled_tokens: 1,
        active_problems: 1,
        objective: 0.0,
        grad_norm: 0.0,
        masked_fraction: 0.0,
        clip_fraction: 0.0,
        mean_geo_weight: 1.0,
        max_geo_weight: 1.0,
        degenerate: false,
        eval_pass_rate: eval,
        eval_by_tier: None,
        theta_checksum: String::new(),
    };
    let series = |evals: &[f64]| -> Vec<MetricsRecord> {
        evals.iter().enumerate().map(|(i, &e)| record((i + 1) * 10, Some(e))).collect()
    };
    // peak 0.8, tail (steps 90, 100) at 0.3 and 0.2
    assert!(collapse_verdict(&series(&[0.2, 0.5, 0.8, 0.7, 0.6, 0.5, 0.4, 0.4, 0.3, 0.2]), 100));
    // one tail eval recovers to half the peak
    assert!(!collapse_verdict(&series(&[0.2, 0.5, 0.8, 0.7, 0.6, 0.5, 0.4, 0.4, 0.4, 0.2]), 100));
    assert!(!collapse_verdict(&series(&[0.0; 10]), 100));
    assert!(!collapse_verdict(&[record(5, None)], 100));
}
