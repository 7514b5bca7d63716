use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rlvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlvr")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

const TASKS: &str = r#"
[[tasks]]
family = "digit-reverse"
length = 1
count = 12
seed = 1

[[tasks]]
family = "modular-add"
operand_digits = 1
modulus = 10
count = 8
seed = 1
"#;

fn train_config(dir: &Path) -> String {
    format!(
        r#"
seed = 2
eval_seed = 3
output_dir = "{}"
dump_waves = true
mismatch = {{ mode = "logit-noise", sigma = 0.2, seed = 1 }}

{TASKS}

[eval]
every = 5
samples = 2

[[eval.tasks]]
family = "digit-reverse"
length = 1
count = 10
seed = 9

[[stages]]
band = "[0.0,1.0]"
group_size = 4
window = 4
learning_rate = 2.0
rollout_batch = 32
update_batch = 16
steps = 6

[[stages]]
band = "[0.0,1.0]"
group_size = 4
window = 6
learning_rate = 2.0
rollout_batch = 32
update_batch = 16
steps = 6
"#,
        dir.join("run").display()
    )
}

#[test]
fn verify_pred_and_completion() {
    let r = stdout_json(&rlvr(&["verify", "--gold", "14.7", "--pred", "4.9 + 9.8"]));
    assert_eq!(r["aggregate"], 1.0);
    let r = stdout_json(&rlvr(&[
        "verify",
        "--gold",
        "P_0 - \\rho g h",
        "--gold",
        "5.1",
        "--completion",
        "\\boxed{P_0 - g h \\rho} and \\boxed{5.2}",
    ]));
    assert_eq!(r["per_box"], serde_json::json!([1, 0]));
    assert_eq!(r["aggregate"], 0.5);
}

#[test]
fn gen_estimate_filter_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    std::fs::write(p("tasks.toml"), TASKS).unwrap();
    assert!(rlvr(&["gen-tasks", "--tasks", &p("tasks.toml"), "--out", &p("d.jsonl")]).status.success());
    let problems = lines(&dir.path().join("d.jsonl"));
    assert_eq!(problems.len(), 20);

    let out = rlvr(&["estimate-difficulty", "--dataset", &p("d.jsonl"), "--out", &p("a.jsonl"), "--rollouts", "8"]);
    assert!(out.status.success());
    let annotated = lines(&dir.path().join("a.jsonl"));
    assert!(annotated.iter().all(|v| v["difficulty"].as_f64().is_some_and(|d| (d * 8.0).fract() == 0.0)));

    let out = rlvr(&[
        "filter",
        "--dataset",
        &p("a.jsonl"),
        "--band",
        "(0.0,0.7]",
        "--out",
        &p("f.jsonl"),
        "--report",
        &p("report.json"),
    ]);
    assert!(out.status.success());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    let total: usize = ["kept", "pruned_trivial", "recovered", "discarded"]
        .iter()
        .map(|k| report[k].as_array().unwrap().len())
        .sum();
    assert_eq!(total, 20);
    assert_eq!(lines(&dir.path().join("f.jsonl")).len(), report["kept"].as_array().unwrap().len());
}

#[test]
fn train_then_replay_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, train_config(dir.path())).unwrap();
    let summary = stdout_json(&rlvr(&["train", "--config", cfg.to_str().unwrap()]));
    assert_eq!(summary["steps"], 12);
    assert_eq!(summary["checkpoints"].as_array().unwrap().len(), 2);

    let run = dir.path().join("run");
    let metrics = lines(&run.join("metrics.jsonl"));
    assert_eq!(metrics.len(), 12);
    let dump = run.join("waves.jsonl");
    for m in &metrics {
        let step = m["step"].to_string();
        let r = stdout_json(&rlvr(&["replay", "--dump", dump.to_str().unwrap(), "--step", &step, "--threshold", "1.5"]));
        assert_eq!(r["objective"].as_f64().unwrap().to_bits(), m["objective"].as_f64().unwrap().to_bits());
        assert_eq!(r["grad_norm"].as_f64().unwrap().to_bits(), m["grad_norm"].as_f64().unwrap().to_bits());
    }

    // resuming from the first boundary reproduces the tail of the log
    let ckpt = summary["checkpoints"][0].as_str().unwrap().to_string();
    let resumed = stdout_json(&rlvr(&["train", "--config", cfg.to_str().unwrap(), "--resume", &ckpt]));
    assert_eq!(resumed["theta_checksum"], summary["theta_checksum"]);
    assert_eq!(lines(&run.join("metrics.jsonl")), metrics);
}

#[test]
fn output_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, train_config(dir.path())).unwrap();
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_rlvr"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("RLVR_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("metrics.jsonl").exists());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let e = stderr_error(&rlvr(&["train", "--config", missing.to_str().unwrap()]));
    assert_eq!(e["error"], "io");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, train_config(dir.path()).replace("window = 6", "window = 2")).unwrap();
    let e = stderr_error(&rlvr(&["train", "--config", bad.to_str().unwrap()]));
    assert_eq!(e["error"], "plan-invalid");
    assert!(e["message"].as_str().unwrap().contains("exploration must expand"));

    let tasks = dir.path().join("tasks.toml");
    std::fs::write(&tasks, "[[tasks]]\nfamily = \"digit-reverse\"\nlength = 0\ncount = 1\nseed = 1\n").unwrap();
    let out = dir.path().join("d.jsonl");
    let e = stderr_error(&rlvr(&["gen-tasks", "--tasks", tasks.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(e["error"], "invalid-spec");

    let e = stderr_error(&rlvr(&["verify", "--gold", "1"]));
    assert_eq!(e["error"], "config");
}
