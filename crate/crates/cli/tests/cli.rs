use std::path::Path;
use std::process::Command;

use trapkit::config::{RunConfig, SeedRange};

fn trapkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trapkit"))
}

fn tiny(out_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::quickstart();
    cfg.out_dir = out_dir.to_path_buf();
    cfg.data.expert_seeds = SeedRange { start: 0, end: 30 };
    cfg.data.test_seeds = SeedRange {
        start: 1_000_000,
        end: 1_000_012,
    };
    cfg.reward.steps = 40;
    cfg.classifier.epochs = 1;
    cfg.evaluation.noise_sweep = false;
    cfg
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_writes_one_record_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let msg = run_ok(trapkit().args(["simulate", "--seeds", "0..10", "--out"]).arg(&out));
    assert!(msg.starts_with("simulate: 10 trajectories"));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 10);
}

#[test]
fn unknown_subcommand_exits_with_usage() {
    let out = trapkit().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = trapkit()
        .args(["label", "--in"])
        .arg(dir.path().join("absent.jsonl"))
        .arg("--out")
        .arg(dir.path().join("x.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"data": {"expert_seeds": "0..100", "test_seeds": "50..150"}}"#,
    )
    .unwrap();
    let out = trapkit()
        .arg("--config")
        .arg(&path)
        .args(["simulate", "--seeds", "0..2", "--out"])
        .arg(dir.path().join("t.jsonl"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn pipeline_matches_individual_stages() {
    let dir = tempfile::tempdir().unwrap();
    let piped = dir.path().join("piped");
    let cfg = tiny(&piped);
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    run_ok(trapkit().arg("--config").arg(&cfg_path).arg("pipeline"));

    let s = dir.path().join("staged");
    let f = |name: &str| s.join(name);
    let base = || {
        let mut c = trapkit();
        c.arg("--config").arg(&cfg_path);
        c
    };
    run_ok(base().args(["simulate", "--seeds", "0..30", "--mix", "expert", "--out"]).arg(f("expert.jsonl")));
    run_ok(base().args(["simulate", "--seeds", "1000000..1000012", "--mix", "test", "--out"]).arg(f("test.jsonl")));
    run_ok(base().arg("label").arg("--in").arg(f("expert.jsonl")).arg("--out").arg(f("expert.labeled.jsonl")));
    run_ok(base().arg("label").arg("--in").arg(f("test.jsonl")).arg("--out").arg(f("test.labeled.jsonl")));
    run_ok(base().arg("train-reward").arg("--demos").arg(f("expert.jsonl")).arg("--out").arg(f("reward.json")));
    run_ok(
        base()
            .arg("annotate")
            .arg("--reward")
            .arg(f("reward.json"))
            .arg("--in")
            .arg(f("expert.labeled.jsonl"))
            .arg("--out")
            .arg(f("expert.annotated.jsonl")),
    );
    run_ok(base().arg("build-dataset").arg("--in").arg(f("expert.annotated.jsonl")).arg("--out").arg(f("dataset.jsonl")));
    run_ok(base().arg("train-classifier").arg("--data").arg(f("dataset.jsonl")).arg("--out").arg(f("model.json")));
    run_ok(
        base()
            .arg("evaluate")
            .arg("--model")
            .arg(f("model.json"))
            .arg("--reward")
            .arg(f("reward.json"))
            .arg("--in")
            .arg(f("test.labeled.jsonl"))
            .arg("--train")
            .arg(f("expert.annotated.jsonl"))
            .arg("--out-dir")
            .arg(&s),
    );
    for name in ["reward.json", "dataset.jsonl", "model.json", "metrics.json", "roc.csv", "groups.csv"] {
        let a = std::fs::read(piped.join(name)).unwrap();
        let b = std::fs::read(s.join(name)).unwrap();
        assert!(a == b, "{name} differs between pipeline and staged runs");
    }

    run_ok(
        base()
            .arg("score")
            .arg("--model")
            .arg(f("model.json"))
            .arg("--reward")
            .arg(f("reward.json"))
            .arg("--in")
            .arg(f("test.labeled.jsonl"))
            .arg("--out")
            .arg(f("scores.csv")),
    );
    let scores = std::fs::read_to_string(f("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 13);
}

#[test]
fn noise_stage_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.jsonl");
    run_ok(trapkit().args(["simulate", "--seeds", "0..4", "--out"]).arg(&src));
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("n{k}.jsonl"));
        let rep = dir.path().join(format!("n{k}.csv"));
        run_ok(
            trapkit()
                .arg("noise")
                .arg("--in")
                .arg(&src)
                .arg("--out")
                .arg(&out)
                .args(["--family", "composite2", "--intensity", "high", "--report"])
                .arg(&rep),
        );
        outs.push((std::fs::read(&out).unwrap(), std::fs::read(&rep).unwrap()));
    }
    assert!(outs[0] == outs[1]);
    assert_ne!(outs[0].0, std::fs::read(&src).unwrap());
    assert_eq!(String::from_utf8_lossy(&outs[0].1).lines().count(), 5);
}
