use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualmargin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmargin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line on stderr");
    serde_json::from_str(line).expect("error is JSON")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.ini");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = "\
[data]
num_classes = 6
head_count = 200
imbalance_ratio = 10
[train]
epochs = 3
";

#[test]
fn train_writes_reports_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_a = dir.path().join("a");
    let run = dualmargin(&["train", "--config", &cfg, "--out", out_a.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in [
        "metrics.csv",
        "metrics.json",
        "history.jsonl",
        "model.json",
        "manifest.json",
        "config.ini",
    ] {
        assert!(out_a.join(f).exists(), "missing {f}");
    }
    let first = fs::read(out_a.join("metrics.csv")).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with("run_id,mode,seed,rank1,macro_recall"));

    let resolved = out_a.join("config.ini");
    let rerun = dualmargin(&["train", "--config", resolved.to_str().unwrap()]);
    assert!(rerun.status.success());
    assert_eq!(first, fs::read(out_a.join("metrics.csv")).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["config"]["train"]["epochs"], 3);

    let eval = dualmargin(&["eval", "--config", resolved.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("s");
    let run = dualmargin(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(run.status.success());
    assert!(!out.join("metrics.json").exists());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(2), Some("9"));
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochs = 3\nseed = many\n");
    let out = dualmargin(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["line"], 3);

    let out = dualmargin(&["train", "--set", "margin.nope=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("margin.m"));
}

#[test]
fn invalid_values_exit_2() {
    let out = dualmargin(&["train", "--set", "margin.m=1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_writes_probes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualmargin(&[
        "verify",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "verify.probes=500",
        "--set",
        "verify.instances=10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
    assert_eq!(
        fs::read_to_string(dir.path().join("probes_alignment.csv"))
            .unwrap()
            .lines()
            .count(),
        501
    );
}

#[test]
fn generate_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("g");
    let run = dualmargin(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(run.status.success());
    let csv = fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("label,split"));
}

#[test]
fn ablate_lambda_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("ab");
    let run = dualmargin(&[
        "ablate",
        "--grid",
        "lambda",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["lambda0", "lambda0.0001", "lambda1", "lambda5"]);
}
