//! End-to-end runs of the `shieldrl` binary on tiny budgets.

use std::path::Path;
use std::process::{Command, Output};

use shieldrl::function_encoder::BasisSet;
use shieldrl::harness::{parse_metrics, Checkpoint, EvalSummary, MetricsRecord};

const TINY: &str = r#"
[experiment]
seed = 5
total_steps = 1600

[train]
steps_per_epoch = 800

[fe]
episodes = 16
heldout_episodes = 4
steps_per_episode = 60
epochs = 25
"#;

fn shieldrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shieldrl"))
        .args(args)
        .output()
        .expect("spawn shieldrl")
}

fn ok(args: &[&str]) -> String {
    let out = shieldrl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pretrain_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let basis = dir.path().join("basis.json");
    let ckpt = dir.path().join("ckpt.json");
    let metrics = dir.path().join("train.jsonl");

    ok(&["pretrain-fe", "--config", s(&cfg), "--out", s(&basis)]);
    let (b, prov) = BasisSet::load(&basis).unwrap();
    assert_eq!(b.k(), 3);
    assert_eq!(prov.unwrap().seed, 5);

    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--basis",
        s(&basis),
        "--out",
        s(&ckpt),
        "--metrics",
        s(&metrics),
    ]);
    let records = parse_metrics(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(matches!(records[0], MetricsRecord::Header { .. }));
    assert_eq!(
        records.iter().filter(|r| matches!(r, MetricsRecord::Epoch(_))).count(),
        2
    );
    let c = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(c.epochs_done, 2);

    let out = ok(&["eval", "--ckpt", s(&ckpt), "--episodes", "3", "--ood"]);
    let summary: EvalSummary = serde_json::from_str(&out).unwrap();
    assert_eq!(summary.episodes, 3);
    assert!(summary.ood && summary.shield);
    assert!((0.0..=1.0).contains(&summary.cost_rate));

    let out = ok(&["eval", "--ckpt", s(&ckpt), "--episodes", "2", "--no-shield"]);
    let plain: EvalSummary = serde_json::from_str(&out).unwrap();
    assert!(!plain.shield);
    assert_eq!(plain.shield_trigger_rate, 0.0);
}

#[test]
fn zero_episode_eval_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[experiment]\nshield_enabled = false\nfe_context = false\ntotal_steps = 0\n",
    )
    .unwrap();
    let ckpt = dir.path().join("ckpt.json");
    let metrics = dir.path().join("m.jsonl");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
        "--metrics",
        s(&metrics),
    ]);

    // zero epochs: the metrics file holds only the header
    let records = parse_metrics(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(records.len(), 1);
    assert!(matches!(records[0], MetricsRecord::Header { .. }));

    let out = ok(&["eval", "--ckpt", s(&ckpt), "--episodes", "0"]);
    let summary: EvalSummary = serde_json::from_str(&out).unwrap();
    assert_eq!(summary.episodes, 0);
    assert_eq!(summary.total_steps, 0);
}

#[test]
fn shielded_training_without_basis_is_refused() {
    let out = shieldrl(&["train", "--out", "/nonexistent/ckpt.json"]);
    assert!(!out.status.success());
}

#[test]
fn unknown_config_key_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nalpah = 1.0\n").unwrap();
    let out = shieldrl(&[
        "pretrain-fe",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("b.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));
}

#[test]
fn unknown_suite_lists_the_suites() {
    let out = shieldrl(&["accept", "--suite", "everything"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["qsafe", "conformal", "directional", "reduction", "all"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn conformal_suite_needs_no_policy() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = ok(&["accept", "--suite", "conformal", "--report", s(&report)]);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 2, "{out}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v.as_array().unwrap().iter().all(|r| r["suite"] == "conformal"));
}
