use std::path::Path;
use std::process::{Command, Output};

fn duospeech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duospeech"))
        .args(args)
        .env_remove("DUOSPEECH_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough that every stage finishes in seconds.
fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "seed": 3,
        "data": { "n_train": 48, "n_dev": 6, "n_test": 6 },
        "warmup": { "epochs": 1 },
        "tokenizer": { "epochs": 1 },
        "pretrain": { "epochs": 1 },
        "s2st": { "epochs": 1 },
        "flow_train": { "epochs": 1, "max_utterances": 8 },
        "eval": { "max_steps": 40 }
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(duospeech(&["--help"]).status.code(), Some(0));
    let o = duospeech(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = duospeech(&["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn print_config_round_trips() {
    let o = duospeech(&["--print-config", "--seed", "11"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 11);
    assert_eq!(v["flow"]["chunk_size"], 10);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"frontend": {"lm_dim": 32}}"#).unwrap();
    let o = duospeech(&["--config", path.to_str().unwrap(), "gen-data", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("frontend.lm_dim"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn verify_passes() {
    let o = duospeech(&["verify"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn staged_pipeline_then_full_run_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    let steps: [&[&str]; 7] = [
        &["gen-data", "--out", &d("data")],
        &["train-tokenizer", "--data", &d("data"), "--out", &d("tok")],
        &["pretrain-base", "--data", &d("data"), "--out", &d("base")],
        &["train-s2st", "--base", &d("base"), "--data", &d("data"), "--out", &d("s2st")],
        &["train-flow", "--data", &d("data"), "--out", &d("flow")],
        &[
            "translate", "--model", &d("s2st"), "--flow", &d("flow"), "--input", &d("data/test.jsonl"),
            "--out", &d("pred"), "--wav",
        ],
        &["eval", "--pred", &d("pred"), "--ref", &d("data/test.jsonl"), "--out", &d("eval")],
    ];
    for args in steps {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        let o = duospeech(&full);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    let loss = std::fs::read_to_string(dir.path().join("s2st/loss.csv")).unwrap();
    assert!(loss.starts_with("step,text_loss,audio_loss,total\n"));
    assert_eq!(std::fs::read_to_string(dir.path().join("pred/predictions.jsonl")).unwrap().lines().count(), 6);
    let staged = std::fs::read(dir.path().join("eval/report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&staged).unwrap();
    assert_eq!(report["n_utterances"], 6);

    let o = duospeech(&["--config", &cfg, "run", "--out", &d("run"), "--wav"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("run/eval/report.json")).unwrap(), staged);
}

#[test]
fn out_root_env_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_duospeech"))
        .args(["--config", &cfg, "gen-data", "--out", "corpus"])
        .env("DUOSPEECH_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("corpus/train.jsonl").exists());
}
