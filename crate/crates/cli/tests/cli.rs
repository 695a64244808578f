use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sea"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sea(args);
    assert!(
        out.status.success(),
        "sea {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Writes a small synthetic dataset and returns the temp dir and CSV path.
fn synth(hours: usize, seed: u64) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["synth", "--hours", &hours.to_string(), "--seed", &seed.to_string(), "--out", p(&out)]);
    (dir, out.join("dataset.csv"))
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_writes_dataset_and_truth() {
    let (dir, data) = synth(500, 2);
    let table = rows(&fs::read_to_string(&data).unwrap());
    assert_eq!(
        table[0],
        ["timestamp", "heat_demand_mw", "ambient_temp_c", "solar_radiation_wm2", "wind_speed_ms"]
    );
    assert_eq!(table.len(), 501);
    assert_eq!(table[1][0], "2008-01-01T00:00");

    let truth = rows(&fs::read_to_string(dir.path().join("data/truth.csv")).unwrap());
    assert_eq!(truth[0], ["timestamp", "s3", "s4", "s12", "s24", "trend", "smooth_trend", "weather_effect", "noise"]);
    // seasonals + trend reproduce demand
    for (d, t) in table[1..].iter().zip(&truth[1..]) {
        let demand: f64 = d[1].parse().unwrap();
        let parts: f64 = t[1..=5].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((demand - parts).abs() < 1e-9);
    }
    assert!(dir.path().join("data/effective_config.txt").exists());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let (_a, a) = synth(300, 9);
    let (_b, b) = synth(300, 9);
    let (_c, c) = synth(300, 10);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn unsupported_period_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sea(&["synth", "--periods", "3,5", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("period 5"));
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = sea(&["synth", "--set", "epoch=5", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let file = dir.path().join("run.conf");
    fs::write(&file, "# comment\nhours = 400\nlearning_rat = 0.1\n").unwrap();
    let out = sea(&["synth", "--config", p(&file), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":3:"), "{err}");
}

#[test]
fn missing_data_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = sea(&["decompose", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn decompose_components_add_up() {
    let (dir, data) = synth(600, 4);
    let out = dir.path().join("dec");
    ok(&["decompose", "--data", p(&data), "--out", p(&out)]);
    let table = rows(&fs::read_to_string(out.join("components.csv")).unwrap());
    assert_eq!(table[0], ["timestamp", "input", "s3", "s4", "s12", "s24", "trend"]);
    assert_eq!(table.len(), 601);
    for r in &table[1..] {
        let v: Vec<f64> = r[1..].iter().map(|x| x.parse().unwrap()).collect();
        let sum: f64 = v[1..].iter().sum();
        assert!((sum - v[0]).abs() <= 1e-9, "{r:?}");
    }

    let single = dir.path().join("dec24");
    ok(&["decompose", "--data", p(&data), "--periods", "24", "--out", p(&single)]);
    let table = rows(&fs::read_to_string(single.join("components.csv")).unwrap());
    assert_eq!(table[0], ["timestamp", "input", "s24", "trend"]);
}

#[test]
fn experiment_writes_all_samples() {
    let (dir, data) = synth(1000, 5);
    let out = dir.path().join("exp");
    ok(&[
        "experiment", "--data", p(&data), "--test-hours", "100", "--models", "A-1,ENN", "--runs", "5",
        "--epochs", "2", "--out", p(&out),
    ]);
    let samples = rows(&fs::read_to_string(out.join("samples.csv")).unwrap());
    assert_eq!(samples.len(), 1 + 10);
    for id in ["A-1", "ENN"] {
        assert_eq!(samples[1..].iter().filter(|r| r[0] == id).count(), 5);
        let preds = rows(&fs::read_to_string(out.join(format!("predictions_{id}.csv"))).unwrap());
        assert_eq!(preds.len(), 101);
    }
    let report = fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("\"p_values_mape\""));
}

#[test]
fn effective_config_reproduces_the_run() {
    let (dir, data) = synth(900, 6);
    let first = dir.path().join("first");
    ok(&[
        "experiment", "--data", p(&data), "--test-hours", "72", "--models", "B-1", "--runs", "2", "--epochs",
        "2", "--seed", "4", "--out", p(&first),
    ]);
    let second = dir.path().join("second");
    let echo = first.join("effective_config.txt");
    ok(&["experiment", "--config", p(&echo), "--out", p(&second)]);
    assert_eq!(
        fs::read(first.join("report.json")).unwrap(),
        fs::read(second.join("report.json")).unwrap()
    );
}

#[test]
fn train_then_predict() {
    let (dir, data) = synth(1000, 7);
    let models = dir.path().join("models");
    ok(&[
        "train", "--data", p(&data), "--test-hours", "48", "--models", "A-1", "--epochs", "3", "--out", p(&models),
    ]);
    let bundle = models.join("A-1");
    assert!(bundle.join("manifest.json").exists());

    let out = dir.path().join("pred");
    let run = ok(&["predict", "--data", p(&data), "--model-dir", p(&bundle), "--out", p(&out)]);
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("A-1 mape="), "{stdout}");
    let preds = rows(&fs::read_to_string(out.join("predictions_A-1.csv")).unwrap());
    assert_eq!(preds.len(), 49);

    let out = sea(&["predict", "--data", p(&data), "--model-dir", p(&dir.path().join("none"))]);
    assert_eq!(out.status.code(), Some(1));
}
