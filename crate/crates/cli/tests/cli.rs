use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[data]
seed = 2
size = 16
count = 6
split = 0.5

[model]
features = 4

[train]
epochs = 1
batch = 2
";

fn segcompress(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segcompress")).args(args).output().unwrap()
}

fn config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.ini");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();

    assert!(segcompress(&["gen-data", "--config", &cfg, "--out", &d("data")]).status.success());
    assert!(dir.path().join("data/manifest.txt").is_file());

    assert!(segcompress(&["train", "--config", &cfg, "--out", &d("run")]).status.success());
    let base = d("run/baseline.csgc");
    let out = segcompress(&["eval", "--config", &cfg, "--checkpoint", &base]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));

    let pruned = d("run/p.csgc");
    assert!(segcompress(&["prune", "--config", &cfg, "--checkpoint", &base, "--out", &pruned, "--amount", "0.5"])
        .status
        .success());
    let quant = d("run/q.csgc");
    assert!(segcompress(&["quantize", "--config", &cfg, "--checkpoint", &pruned, "--out", &quant])
        .status
        .success());
    assert!(fs::metadata(&quant).unwrap().len() < fs::metadata(&base).unwrap().len() / 2);
}

#[test]
fn budget_overrun_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\n[budget]\nmax_mb = 0.0001\n");
    let out = segcompress(&["pipeline", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("exceeds the size budget"));
}

#[test]
fn pipeline_within_budget_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = segcompress(&["pipeline", "--config", &cfg, "--seed", "3", "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pruned+quantized"));
}

#[test]
fn errors_exit_with_one() {
    let out = segcompress(&["pipeline", "--config", "/nonexistent/run.ini", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "\n[train]\nloss = hinge\n");
    let out = segcompress(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
