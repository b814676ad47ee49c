use std::path::Path;
use std::process::{Command, Output};

use tokenmixer::ExperimentConfig;

fn tokenmixer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenmixer")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.toml");
    let text = format!(
        "name = \"tiny\"\n[data]\ntrain_examples = 512\neval_examples = 512\n[model]\ndim = 16\nheads = 4\nlayers = 2\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn default_config_output_parses_back() {
    let out = tokenmixer(&["default-config"]);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn train_then_quantize_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run_dir = dir.path().join("run");
    let run = run_dir.to_str().unwrap();
    let out = tokenmixer(&["-c", &cfg, "train", "--out", run]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "metrics.jsonl", "checkpoint.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    let ckpt = run_dir.join("checkpoint.json");
    let out = tokenmixer(&["-c", &cfg, "quantize-eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", run]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));

    let out = tokenmixer(&["report", run_dir.join("report.json").to_str().unwrap(), run_dir.join("fidelity.json").to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success());
    assert!(text.contains("tiny") && text.contains("AUC fp8"));
}

#[test]
fn failed_invariant_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[parallel]\nlayers = [1]\ndevices = [2]\ntolerance = -1.0\n");
    let out = tokenmixer(&["-c", &cfg, "sim-parallel"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "not_a_key = 1\n");
    assert_eq!(tokenmixer(&["-c", &cfg, "sim-parallel"]).status.code(), Some(1));
    assert_eq!(tokenmixer(&["ablate", "--preset", "components/nope"]).status.code(), Some(1));
}

#[test]
fn single_preset_ablation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[ablation]\nseeds = [0]\n");
    let out = tokenmixer(&["-c", &cfg, "ablate", "--preset", "components/no-mixing", "--check-determinism"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.contains("no-mixing") && text.contains("PASS: repeated run is identical"));
}
