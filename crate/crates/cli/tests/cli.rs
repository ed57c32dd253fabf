use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempo_cli::run::artifact_hashes;
use tempo_fields::store::read_dataset;

fn tempo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempo")).args(args).arg("--quiet").current_dir(cwd).output().expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).expect("stdout is one JSON line")
}

fn err_json(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(line.lines().last().unwrap()).expect("stderr ends with a JSON line");
    assert_eq!(v["error"], kind);
    assert_eq!(v["exit_code"], code);
}

const TINY: &str = "\
dataset: {pde: nsv, paths: [data/dataset.h5], resolution: 16}
model: {kind: tempo, hyperparams: {n_modes: 4, hidden: 8, projection: 8, depth: 1, embed_dim: 16, groups: 4}}
ae: {steps: 10, base_channels: 8, max_channels: 16, groups: 4}
train: {seed: 3, steps: 6, batch_size: 4, seq_len: 5, eval_every: 3, val_examples: 4, lr: 1.0e-3}
sample: {horizon: 4}
";

fn tiny_dataset(dir: &Path) {
    ok_json(&tempo(&["gen-data", "--pde", "nsv", "--n-traj", "10", "--grid", "16", "--n-frames", "12", "--seed", "5", "--run-dir", "data"], dir));
    std::fs::write(dir.join("tiny.yaml"), TINY).unwrap();
}

#[test]
fn errors_are_json_with_stable_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    err_json(&tempo(&["gen-data", "--pde", "heat", "--n-traj", "1", "--seed", "0"], d), 2, "usage");
    err_json(&tempo(&["frobnicate"], d), 2, "usage");
    err_json(&tempo(&["evaluate", "--oracle", "--dataset", "missing.h5"], d), 4, "missing_file");
    std::fs::write(d.join("bad.yaml"), "dataset: {pde: nsv, paths: [x.h5]}\ntrain: {seed: 1, bogus: 2}\n").unwrap();
    err_json(&tempo(&["train", "--config", "bad.yaml"], d), 3, "config");
    std::fs::write(d.join("junk.h5"), b"not hdf5").unwrap();
    err_json(&tempo(&["evaluate", "--oracle", "--dataset", "junk.h5"], d), 5, "data");
}

#[test]
fn gen_data_writes_the_requested_shape() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(&tempo(&["gen-data", "--pde", "nsv", "--n-traj", "4", "--grid", "64", "--seed", "1", "--run-dir", "g"], dir.path()));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("g/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["shape"], serde_json::json!([4, 50, 1, 64, 64]));
    assert_eq!(manifest["fingerprint"], v["fingerprint"]);
    let trajs = read_dataset(&dir.path().join("g/dataset.h5")).unwrap();
    assert_eq!(trajs.len(), 4);
    assert!(trajs.iter().all(|t| t.data.dim() == (50, 1, 64, 64) && t.data.iter().all(|x| x.is_finite())));
}

#[test]
fn oracle_evaluation_scores_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let v = ok_json(&tempo(&["evaluate", "--oracle", "--dataset", "data/dataset.h5", "--split", "all", "--window", "4", "--run-dir", "e"], dir.path()));
    assert_eq!(v["n_examples"], 10 * (12 - 1 - 4));
    for k in ["mse", "spectral_mse", "rfne", "density_mse"] {
        assert_eq!(v["mean"][k], 0.0, "{k}");
    }
    assert_eq!(v["mean"]["pearson"], 1.0);
    assert!(dir.path().join("e/metrics.csv").is_file());
}

#[test]
fn pipeline_reruns_reproduce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_dataset(d);
    for run in ["a", "b"] {
        ok_json(&tempo(&["train", "--config", "tiny.yaml", "--run-dir", &format!("{run}/train")], d));
        let ckpt = format!("{run}/train/model.ckpt");
        ok_json(&tempo(&["evaluate", "--checkpoint", &ckpt, "--dataset", "data/dataset.h5", "--run-dir", &format!("{run}/eval")], d));
        let r = ok_json(&tempo(&["rollout", "--checkpoint", &ckpt, "--dataset", "data/dataset.h5", "--run-dir", &format!("{run}/roll")], d));
        assert_eq!(r["finite"], true);
        ok_json(&tempo(
            &["spectra", "--pred", &format!("{run}/roll/rollout.h5"), "--truth", &format!("{run}/roll/truth.h5"), "--run-dir", &format!("{run}/spec")],
            d,
        ));
    }
    let (a, b) = (artifact_hashes(&d.join("a")).unwrap(), artifact_hashes(&d.join("b")).unwrap());
    assert!(a.iter().any(|(p, _)| p == "roll/frames.png"));
    assert!(a.iter().any(|(p, _)| p == "spec/spectrum.svg"));
    assert_eq!(a, b);
}

#[test]
fn mismatched_autoencoder_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_dataset(d);
    ok_json(&tempo(&["train", "--config", "tiny.yaml", "--run-dir", "t"], d));
    std::fs::write(d.join("other.yaml"), TINY.replace("seed: 3", "seed: 4")).unwrap();
    ok_json(&tempo(&["train-ae", "--config", "other.yaml", "--run-dir", "other"], d));
    let out = tempo(&["evaluate", "--checkpoint", "t/model.ckpt", "--ae", "other/ae.ckpt", "--dataset", "data/dataset.h5"], d);
    err_json(&out, 6, "checkpoint");
}

#[test]
fn modes_ablation_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_dataset(d);
    ok_json(&tempo(&["ablate", "--sweep", "modes", "--config", "tiny.yaml", "--steps", "3", "--jobs", "2", "--run-dir", "ab"], d));
    let csv = std::fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let labels: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["modes-1", "modes-2", "modes-4", "modes-8", "modes-16"]);
}
