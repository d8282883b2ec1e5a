//! End-to-end tests of the binary: exit codes, file outputs, determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coarse2fine"));
    cmd.env("COARSE2FINE_THREADS", "1");
    cmd
}

/// A config small enough that train plus evaluate stays under a second.
fn tiny_config_json() -> &'static str {
    r#"{
        "seeds": [0],
        "data": {
            "tiles": 10,
            "tile_size": 8,
            "sounding_atoms": [0, 10, 60],
            "sounding_probs": [0.05, 0.45, 0.5],
            "aggregation_factors": [1, 2, 4]
        },
        "train": { "epochs": 1, "batch_size": 4 },
        "loss": { "sample_size": 60 },
        "model": { "hidden_units": [2, 4, 4] },
        "pixel_model": { "hidden_units": [4] }
    }"#
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, tiny_config_json()).unwrap();
    path
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn gen_data_writes_deterministic_manifest() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    let run = |out: &Path| {
        let output = binary()
            .args(["gen-data", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert_success(&output);
    };
    run(&out_a);
    run(&out_b);

    let manifest_a = fs::read(out_a.join("manifest.json")).unwrap();
    let manifest_b = fs::read(out_b.join("manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    assert!(out_a.join("tiles.json").exists());
}

#[test]
fn full_pipeline_train_evaluate_sweep() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("runs");

    let output = binary()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_success(&output);
    assert!(out.join("checkpoint_cs-sunet_0.json").exists());
    assert!(out.join("curves_cs-sunet_0.csv").exists());

    let output = binary()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_success(&output);
    let metrics = out.join("metrics_cs-sunet.csv");
    let first = fs::read(&metrics).unwrap();
    assert!(out.join("pairs_cs-sunet.csv").exists());

    // Rerunning evaluation reproduces the CSV byte for byte.
    let output = binary()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_success(&output);
    assert_eq!(first, fs::read(&metrics).unwrap());

    let output = binary()
        .args(["sweep", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--param", "min-soundings", "--values", "1,30"])
        .output()
        .unwrap();
    assert_success(&output);
    let sweep = fs::read_to_string(out.join("sweep_min_soundings.csv")).unwrap();
    assert!(sweep.contains("min_soundings,1,"));
    assert!(sweep.contains("min_soundings,30,"));
}

#[test]
fn ridge_predictor_flag_overrides_config() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("runs");

    let output = binary()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--predictor", "ridge"])
        .output()
        .unwrap();
    assert_success(&output);
    assert!(out.join("checkpoint_ridge_0.json").exists());
    assert!(!out.join("curves_ridge_0.csv").exists());
}

#[test]
fn malformed_config_exits_2_with_diagnostic() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"seeds": [0], "epohcs": 3}"#).unwrap();

    let output = binary().args(["gen-data", "--config"]).arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("epohcs"), "stderr: {}", stderr);

    // Truncated JSON carries a line/column diagnostic.
    fs::write(&path, "{\"seeds\": [0]").unwrap();
    let output = binary().args(["gen-data", "--config"]).arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line"), "stderr: {}", stderr);
}

#[test]
fn unknown_names_exit_2() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());

    let output = binary()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--predictor", "resnet"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("resnet"));

    let output = binary()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--param", "epochs", "--values", "1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));

    let output = binary()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--param", "lambda", "--values", "0.5,zebra"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));

    // Missing subcommand or flags are usage errors too.
    let output = binary().output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_checkpoints_exit_1() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("empty");
    fs::create_dir_all(&out).unwrap();

    let output = binary()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn bad_thread_env_exits_2() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("runs");

    let output = binary()
        .env("COARSE2FINE_THREADS", "many")
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("COARSE2FINE_THREADS"));
}
