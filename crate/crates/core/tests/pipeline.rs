use std::fs;

use segcompress::pipeline::{loss_sweep, run_pipeline, PipelineConfig, STAGE_MANIFEST};
use segcompress::losses::LossKind;
use segcompress::Error;

const SMALL: &str = "\
[data]
seed = 5
size = 16
count = 10
split = 0.8

[model]
features = 4

[train]
lr = 0.002
epochs = 2
batch = 4
seed = 5

[prune]
method = l1_unstructured
amount = 0.3
extra_amounts = 0.5

[budget]
max_mb = 10
";

fn small() -> PipelineConfig {
    PipelineConfig::parse(SMALL, "small.ini").unwrap()
}

#[test]
fn untrained_baseline_only_reports_zero_deltas() {
    let mut cfg = small();
    cfg.train.epochs = 0;
    cfg.prune = None;
    cfg.quant = None;
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].label, "baseline");
    assert!(out.report.lines().nth(2).unwrap().ends_with("0.00%    0.00%"));
    assert!(!out.budget_exceeded);
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&small(), dir.path()).unwrap();
    let labels: Vec<&str> = out.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["baseline", "pruned(0.3)", "pruned(0.5)", "quantized", "pruned+quantized"]);
    for f in [
        "dataset/manifest.txt",
        "trace.csv",
        "baseline.csgc",
        "pruned.csgc",
        "pruned_sparse.csgc",
        "quantized.csgc",
        "pruned_quantized.csgc",
        "report.txt",
        "report.csv",
        STAGE_MANIFEST,
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(out.trace.len(), 2);
    let base = out.rows[0].size_mb;
    assert!((out.rows[1].size_mb - base * 0.7).abs() < 1e-12);
    // one byte per weight plus scale and zero point per entry
    let ckpt = segcompress::checkpoint::Checkpoint::load(dir.path().join("baseline.csgc")).unwrap();
    let quant_bytes: usize = ckpt.entries().iter().map(|e| e.value.numel() + 8).sum();
    assert_eq!(out.rows[3].size_mb, quant_bytes as f64 / 1e6);
}

#[test]
fn reruns_reuse_training_and_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(&small(), dir.path()).unwrap();
    assert!(first.reused.is_empty());
    let bytes = fs::read(dir.path().join("report.txt")).unwrap();

    let second = run_pipeline(&small(), dir.path()).unwrap();
    assert_eq!(second.reused, ["train"]);
    assert_eq!(fs::read(dir.path().join("report.txt")).unwrap(), bytes);

    let fresh = tempfile::tempdir().unwrap();
    run_pipeline(&small(), fresh.path()).unwrap();
    assert_eq!(fs::read(fresh.path().join("report.txt")).unwrap(), bytes);

    let mut changed = small();
    changed.train.lr = 0.001;
    assert!(run_pipeline(&changed, dir.path()).unwrap().reused.is_empty());
}

#[test]
fn tampered_checkpoint_is_retrained() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&small(), dir.path()).unwrap();
    let path = dir.path().join("baseline.csgc");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(run_pipeline(&small(), dir.path()).unwrap().reused.is_empty());
}

#[test]
fn budget_overrun_is_flagged() {
    let mut cfg = small();
    cfg.max_mb = 1e-4;
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(out.budget_exceeded);
    assert!(out.report.contains("* exceeds the size budget\n"));
    assert!(out.report.contains("Full-scale reference"));
}

#[test]
fn stage_failures_name_the_stage() {
    let mut cfg = small();
    cfg.data.count = 1;
    let dir = tempfile::tempdir().unwrap();
    match run_pipeline(&cfg, dir.path()) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "data"),
        other => panic!("expected a data stage error, got {other:?}"),
    }
}

#[test]
fn config_errors_carry_line_numbers() {
    let text = "[train]\nepochs = 3\nlr = fast\n";
    match PipelineConfig::parse(text, "bad.ini") {
        Err(Error::Config { path, line, .. }) => assert_eq!((path.as_str(), line), ("bad.ini", 3)),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(matches!(
        PipelineConfig::parse("[train]\nlearning_rate = 1\n", "x.ini"),
        Err(Error::Config { line: 2, .. })
    ));
    assert!(PipelineConfig::load("/nonexistent/run.ini").is_err());
}

#[test]
fn sweep_rows_follow_report_order() {
    let mut cfg = small();
    cfg.prune = None;
    cfg.quant = None;
    let report = loss_sweep(&cfg, &[LossKind::CrossEntropy, LossKind::FocalLovasz, LossKind::Dice], &[0, 1]).unwrap();
    let order: Vec<LossKind> = report.rows.iter().map(|r| r.loss).collect();
    assert_eq!(order, [LossKind::Dice, LossKind::FocalLovasz, LossKind::CrossEntropy]);
    assert!(report.rows.iter().all(|r| r.final_miou.len() == 2));
    assert!(report.focal_lovasz_at_least_ce().is_some());
    assert!(report.to_text().contains("Focal-Lovász >= Cross-entropy:"));
    assert_eq!(report, loss_sweep(&cfg, &[LossKind::CrossEntropy, LossKind::FocalLovasz, LossKind::Dice], &[0, 1]).unwrap());
}
