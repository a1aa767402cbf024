use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "desk"
eval_every = 5
eval_tasks = 50
[env]
kind = "chain_arith"
chain_length = 3
[train]
steps = 10
batch_size = 4
budget = 4.0
"#;

fn duet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duet")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[env]\nkind = \"channel\"\n[train]\neta = -1.0\n").unwrap();
    let o = duet(dir.path(), &["--config", "bad.toml", "train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train.eta"), "{}", stderr(&o));

    fs::write(dir.path().join("typo.toml"), "[env]\nkind = \"channel\"\n[train]\nbugdet = 4.0\n").unwrap();
    let o = duet(dir.path(), &["--config", "typo.toml", "train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bugdet"), "{}", stderr(&o));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let base = ["--config", "tiny.toml", "--out", "run"];
    let o = duet(dir.path(), &[&base[..], &["train"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.toml", "metrics.jsonl", "checkpoints/step_00000010.json", "reports/final.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ck = "run/checkpoints/step_00000010.json";
    for mode in ["duet", "small-alone", "large-alone", "truncation"] {
        let o = duet(dir.path(), &[&base[..], &["eval", "--checkpoint", ck, "--mode", mode]].concat());
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(line["step"], 10);
    }
    let o = duet(dir.path(), &[&base[..], &["eval", "--checkpoint", ck, "--budget", "2"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("reports/eval_truncation_2.txt").exists());

    let o = duet(dir.path(), &[&base[..], &["export"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("reports/lambda_trajectory.csv").exists());
}

#[test]
fn budget_needs_truncation_mode() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = duet(dir.path(), &["--config", "tiny.toml", "--out", "run", "eval", "--mode", "duet", "--budget", "3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--budget"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = duet(dir.path(), &["--config", "tiny.toml", "--out", "run", "train", "--resume", "nope.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}
