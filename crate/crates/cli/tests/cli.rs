use std::fs;
use std::process::{Command, Output};

fn c3r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3r"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run c3r")
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    fs::write(&cfg, "[synth]\nn_samples = 8\nbogus = 1\n").unwrap();
    let out = c3r(&["gen", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = c3r(&["train", "--data", dir.path().join("nope").to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn short_run_then_eval_rejects_unknown_drop_channel() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    fs::write(p("gen.toml"), "[synth]\nn_samples = 16\n").unwrap();
    fs::write(p("train.toml"), "[train]\nsteps = 2\n").unwrap();
    assert!(c3r(&["gen", "--config", &p("gen.toml"), "--out", &p("data")]).status.success());
    assert!(c3r(&["train", "--config", &p("train.toml"), "--data", &p("data"), "--out", &p("run")]).status.success());
    let metrics = fs::read_to_string(p("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let ckpt = p("run/checkpoint.safetensors");
    let out = c3r(&["eval", "--data", &p("data"), "--checkpoint", &ckpt, "--drop", "golgi", "--out", &p("eval")]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn vit_baseline_rejects_flip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    fs::write(p("gen.toml"), "[synth]\nn_samples = 16\n").unwrap();
    fs::write(p("train.toml"), "[ablation]\ngrouped_stem = false\nbranches = false\nmcd = false\ninstance_norm = true\n[train]\nsteps = 1\n").unwrap();
    assert!(c3r(&["gen", "--config", &p("gen.toml"), "--out", &p("data")]).status.success());
    let train = c3r(&["train", "--config", &p("train.toml"), "--data", &p("data"), "--out", &p("run")]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let out = c3r(&["eval", "--data", &p("data"), "--checkpoint", &p("run/checkpoint.safetensors"), "--flip", "--out", &p("eval")]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
