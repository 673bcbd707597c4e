use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vidmix::harness::ExperimentConfig;

fn vidmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidmix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// The default configuration shrunk to a few seconds of training.
fn tiny_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::toy_default();
    cfg.train.data.samples_per_class = 1;
    cfg.train.test_samples_per_class = 1;
    for spec in [&mut cfg.train.gsf_toy, &mut cfg.train.xvit_toy] {
        spec.epochs = 2;
        spec.warmup_epochs = 1;
    }
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn bench_csv_is_reproducible() {
    let args = [
        "bench",
        "--frames",
        "2,4,8",
        "--tokens",
        "4",
        "--head-dim",
        "6",
        "--seed",
        "3",
    ];
    let a = vidmix(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, vidmix(&args).stdout);
    let text = stdout(&a);
    assert!(text.starts_with("model,T,S,dh,macs\nstm,2,4,6,"));
    assert!(text.contains("# slope stm 1\n"));
    assert!(text.contains("# slope full 2\n"));
}

#[test]
fn eval_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = vidmix(&[
            "eval",
            "--config",
            &cfg,
            "--seed",
            "5",
            "--csv",
            path.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(stdout(&out).contains("Ensemble"));
        fs::read(path).unwrap()
    };
    let first = run("a.csv");
    assert_eq!(first, run("b.csv"));
    let text = String::from_utf8(first).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "task,top1,top5");
    assert_eq!(lines.len(), 4);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut json: String = stdout(&vidmix(&["default-config"]));
    json = json.replacen('{', "{\n  \"optimizer\": \"adam\",", 1);
    fs::write(&path, json).unwrap();
    let out = vidmix(&["eval", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimizer"));
}

#[test]
fn default_config_parses() {
    let json = stdout(&vidmix(&["default-config"]));
    assert_eq!(
        ExperimentConfig::from_json(&json).unwrap(),
        ExperimentConfig::toy_default()
    );
}

#[test]
fn synth_writes_videos_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("data");
    let out = vidmix(&[
        "synth",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let annotations = fs::read_to_string(out_dir.join("annotations.csv")).unwrap();
    assert_eq!(annotations.lines().count(), 1 + 9);
    let first = fs::read_to_string(out_dir.join("synth_0000_v0_n0.txt")).unwrap();
    assert!(first.starts_with("shape: 16 3 16 20\n"));
}

#[test]
fn train_toy_prints_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("gsf.ckpt");
    let out = vidmix(&[
        "train-toy",
        "--model",
        "gsf-toy",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 3);
    assert!(fs::read_to_string(ckpt).unwrap().starts_with("name: "));
}
