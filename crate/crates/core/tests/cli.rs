use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_wfci-sleep");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("WFCI_SLEEP_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn list_tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.push(p);
        }
    }
    out.sort();
    out
}

const SYNTH: &str = r#"{"n_epochs": 12, "mean_dwell_s": [6.0, 6.0, 6.0]}"#;
const TRAIN: &str = r#"{
  "epoch_s": 2.0,
  "arch": {"n_conv_blocks": 2, "channels": 4, "lstm_hidden": 4, "input_hw": [32, 32], "frames_per_epoch": 34},
  "train": {"lr": 0.001, "max_epochs": 1, "batch_size": 4},
  "split": {"fractions": [0.5, 0.25, 0.25], "mode": "by_recording"}
}"#;

/// Runs synth, preprocess and train below `root`; returns the three output dirs.
fn chain(root: &Path, extra: &[&str]) -> [PathBuf; 3] {
    let synth_cfg = write(&root.join("synth.json"), SYNTH);
    let train_cfg = write(&root.join("train.json"), TRAIN);
    let [raw, pre, model] = ["raw", "pre", "model"].map(|d| root.join(d));
    let with = |args: &[&str]| ok(&[args, extra].concat());
    with(&["synth", "--count", "4", "--config", s(&synth_cfg), "--out", s(&raw)]);
    with(&["preprocess", "--input", s(&raw), "--out", s(&pre)]);
    with(&["train", "--data", s(&pre), "--config", s(&train_cfg), "--out", s(&model)]);
    [raw, pre, model]
}

#[test]
fn full_chain_writes_only_below_out() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let [raw, pre, model] = chain(root, &["--seed", "3"]);
    for d in [&raw, &pre, &model] {
        let m: Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
        for rel in m["outputs"].as_array().unwrap() {
            assert!(d.join(rel.as_str().unwrap()).exists(), "{rel} missing under {}", d.display());
        }
    }
    let report: Value = serde_json::from_slice(&fs::read(model.join("metrics.json")).unwrap()).unwrap();
    assert!(report["kappa"]["value"].is_number());
    assert!(model.join("model.sscn").is_file());

    let scored = root.join("scored");
    ok(&["score", "--checkpoint", s(&model.join("model.sscn")), "--data", s(&pre), "--out", s(&scored)]);
    let evald = root.join("eval");
    let eval_cfg = write(&root.join("eval.json"), r#"{"epoch_s": 2.0}"#);
    ok(&[
        "eval",
        "--config",
        s(&eval_cfg),
        "--pred",
        s(&scored.join("predictions.csv")),
        "--ref",
        s(&pre.join("labels.csv")),
        "--data",
        s(&pre),
        "--out",
        s(&evald),
    ]);
    let report: Value = serde_json::from_slice(&fs::read(evald.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["n_epochs"].as_u64(), Some(48));
    assert!(report["band_power"].is_object() || report["band_power"].is_array());

    // Every file in the tree sits below one of the output directories or is a config.
    let outs = [&raw, &pre, &model, &scored, &evald];
    for p in list_tree(root) {
        let inside = outs.iter().any(|o| p.starts_with(o));
        let config = p.extension().is_some_and(|e| e == "json") && p.parent() == Some(root);
        assert!(inside || config || outs.contains(&&p), "stray file {}", p.display());
    }
}

#[test]
fn score_emits_one_row_per_epoch_for_unlabelled_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let [_, pre, model] = chain(root, &[]);
    let first = fs::read_dir(&pre)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("meta.json").is_file())
        .min()
        .unwrap();
    fs::remove_file(first.join("labels.csv")).unwrap();
    let id = first.file_name().unwrap().to_str().unwrap().to_string();
    let scored = root.join("scored");
    ok(&["score", "--checkpoint", s(&model.join("model.sscn")), "--data", s(&first), "--out", s(&scored)]);
    let csv = fs::read_to_string(scored.join(format!("{id}.hypnogram.csv"))).unwrap();
    assert_eq!(csv.lines().count() - 1, 12);
    assert!(!scored.join("metrics.json").exists());
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write(
        &dir.path().join("a.csv"),
        "recording_id,epoch_index,label\nr1,0,W\nr1,1,N\nr1,2,N\nr1,3,R\nr1,4,W\n",
    );
    let out = dir.path().join("out");
    ok(&["eval", "--pred", s(&labels), "--ref", s(&labels), "--out", s(&out)]);
    let report: Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["kappa"]["value"].as_f64(), Some(1.0));
    assert_eq!(report["metrics"]["accuracy"].as_f64(), Some(1.0));
    assert!(out.join("manifest.json").is_file());

    let agree = dir.path().join("agree");
    ok(&["agree", "--a", s(&labels), "--b", s(&labels), "--out", s(&agree)]);
    let report: Value = serde_json::from_slice(&fs::read(agree.join("agreement.json")).unwrap()).unwrap();
    assert_eq!(report["kappa"]["value"].as_f64(), Some(1.0));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad = write(&dir.path().join("bad.json"), r#"{"n_epochs": 4, "colour": "blue"}"#);
    let o = run(&["synth", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let bad = write(&dir.path().join("bad2.json"), r#"{"train": {"lr": -1.0}}"#);
    let o = run(&["train", "--data", s(dir.path()), "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));

    let o = run(&["preprocess", "--input", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["frobnicate", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["synth", "--threads", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn deterministic_chain_is_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = ["--threads", "1", "--deterministic", "--seed", "11"];
    let [_, _, ma] = chain(a.path(), &flags);
    let [_, _, mb] = chain(b.path(), &flags);
    for f in ["metrics.json", "val_metrics.json", "model.sscn"] {
        assert_eq!(fs::read(ma.join(f)).unwrap(), fs::read(mb.join(f)).unwrap(), "{f} differs");
    }
}
