//! The `semiseg` binary end to end on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "arch": { "stage_widths": [4, 4, 4, 4, 4], "input_size": 16 },
  "train": { "epochs": 1, "augment": false, "optim": { "init_lr": 0.03 } }
}"#;

fn semiseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semiseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = semiseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: &str, seed: &str) {
    ok(&["gen-data", "--out", p(dir), "--n", n, "--size", "32", "--seed", seed]);
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "4", "3");
    gen(b.path(), "4", "3");
    for sub in ["images/synth_00002.png", "masks/synth_00002.png", "splits.json"] {
        assert_eq!(fs::read(a.path().join(sub)).unwrap(), fs::read(b.path().join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(semiseg(&["gen-data", "--out", p(dir.path()), "--n", "0"]).status.code(), Some(2));
    assert_eq!(semiseg(&["gen-data", "--out", p(dir.path()), "--n", "2", "--size", "8"]).status.code(), Some(2));
    assert_eq!(semiseg(&["train", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(semiseg(&["train", "--data", "x", "--out", "y", "--fusion", "mean"]).status.code(), Some(2));
    assert_eq!(semiseg(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = semiseg(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
    let out = semiseg(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn train_eval_predict_and_sweep() {
    let root = tempfile::tempdir().unwrap();
    let (data, run, cfg) = (root.path().join("data"), root.path().join("run"), root.path().join("tiny.json"));
    fs::write(&cfg, TINY).unwrap();
    gen(&data, "20", "0");

    let stdout = ok(&["train", "--config", p(&cfg), "--data", p(&data), "--labeled-ratio", "0.5", "--fusion", "concat", "--out", p(&run)]);
    assert!(stdout.contains("Dice"));
    for f in ["metrics.csv", "config.json", "splits.json", "checkpoint/manifest.json", "checkpoint/params.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(run.join("checkpoint/manifest.json")).unwrap();
    assert!(manifest.contains("\"fusion\": \"concat\""));

    let ckpt = run.join("checkpoint");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "val"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["split"], "val");
    assert_eq!(report["images"], 4);
    let splits = run.join("splits.json");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "labeled", "--splits", p(&splits)]);

    let shots = root.path().join("pred");
    ok(&["predict", "--ckpt", p(&ckpt), "--image", p(&data.join("images/synth_00000.png")), "--out-dir", p(&shots)]);
    for f in ["y_coarse", "y_fine1", "overlay", "x_mask", "x_hat1"] {
        let img = image::open(shots.join(format!("{f}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32), "{f}");
    }

    let sweep = root.path().join("sweep");
    let stdout = ok(&["sweep", "--config", p(&cfg), "--data", p(&data), "--out", p(&sweep), "--ratios", "0.5,1.0"]);
    assert!(stdout.contains("50% labeled") && stdout.contains("100% labeled"));
    let table = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("labeled_ratio,n_labeled,dice"));

    // a tampered blob is refused with the reason
    let blob = ckpt.join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&blob, bytes).unwrap();
    let out = semiseg(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("hash") && err.contains("differs from manifest"), "{err}");
}
