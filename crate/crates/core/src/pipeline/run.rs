use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use super::report::{reference_table, report_csv, report_table, ReportRow};
use crate::checkpoint::Checkpoint;
use crate::data::{decode_ppm, encode_ppm, generate_dataset, split, write_dataset, SceneSample};
use crate::error::{Error, Result};
use crate::model::{evaluate, train, write_trace_csv, EpochRecord, TinySegNet};
use crate::prune::{apply_mask, generate_mask, pruned_size_mb, sparsify, PruneSpec};
use crate::quant::{ptq_checkpoint, LayerFilter};

/// File recording, per stage, the hash of its inputs and of its output.
pub const STAGE_MANIFEST: &str = "stages.tsv";

/// Training and validation scenes exactly as stored on disk (8-bit images).
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

/// Generates the configured scenes, rounds images through their 8-bit file
/// encoding and splits them.
pub fn prepare_data(cfg: &PipelineConfig) -> Result<PreparedData> {
    let scenes = generate_dataset(&cfg.data.synth, cfg.data.count)?
        .into_iter()
        .map(|s| SceneSample::new(decode_ppm(&encode_ppm(&s.image)?)?, s.labels))
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = split(scenes, cfg.data.split)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "split {} of {} scenes leaves an empty side",
            cfg.data.split, cfg.data.count
        )));
    }
    Ok(PreparedData { train, val })
}

/// Result of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub rows: Vec<ReportRow>,
    pub trace: Vec<EpochRecord>,
    pub report: String,
    /// Stages whose stored output was reused.
    pub reused: Vec<String>,
    /// The most compressed artifact produced is still over budget.
    pub budget_exceeded: bool,
}

fn sha(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of the scene contents in order.
fn dataset_hash(samples: &[SceneSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        for v in s.labels.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
struct StageRecord {
    input: String,
    file: String,
    output: String,
}

struct RunDir {
    root: PathBuf,
    previous: BTreeMap<String, StageRecord>,
    current: Vec<(String, StageRecord)>,
}

impl RunDir {
    fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(STAGE_MANIFEST);
        let mut previous = BTreeMap::new();
        if let Ok(text) = fs::read_to_string(&path) {
            // an unreadable manifest just means nothing is reused
            for line in text.lines() {
                if let [stage, input, file, output] = line.split('\t').collect::<Vec<_>>()[..] {
                    previous.insert(
                        stage.to_string(),
                        StageRecord {
                            input: input.into(),
                            file: file.into(),
                            output: output.into(),
                        },
                    );
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            previous,
            current: Vec::new(),
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<String> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(sha(&[bytes]))
    }

    /// Bytes of a stage's stored output if its inputs and file still match.
    fn reusable(&self, stage: &str, input: &str) -> Option<Vec<u8>> {
        let rec = self.previous.get(stage)?;
        if rec.input != input {
            return None;
        }
        let bytes = fs::read(self.root.join(&rec.file)).ok()?;
        (sha(&[&bytes]) == rec.output).then_some(bytes)
    }

    fn record(&mut self, stage: &str, input: String, file: &str, output: String) {
        self.current.push((
            stage.into(),
            StageRecord {
                input,
                file: file.into(),
                output,
            },
        ));
    }

    fn finish(&self) -> Result<()> {
        let mut text = String::new();
        for (stage, r) in &self.current {
            let _ = writeln!(text, "{stage}\t{}\t{}\t{}", r.input, r.file, r.output);
        }
        self.write(STAGE_MANIFEST, text.as_bytes()).map(drop)
    }
}

fn in_stage<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

fn eval_row(label: String, ckpt: &Checkpoint, cfg: &PipelineConfig, val: &[SceneSample], size_mb: f64) -> Result<ReportRow> {
    let net = TinySegNet::from_checkpoint(ckpt)?;
    let cm = evaluate(&net, val, cfg.train.batch_size)?;
    Ok(ReportRow {
        label,
        per_class_iou: cm.iou_per_class(),
        miou: cm.miou(cfg.train.include_background)?,
        size_mb,
        over_budget: size_mb > cfg.max_mb,
    })
}

fn amount_label(amount: f64) -> String {
    format!("pruned({amount})")
}

/// Runs data -> train -> eval -> prune -> eval -> quant -> eval -> combined,
/// writing every artifact under `out`.
///
/// Training is skipped when `out` already holds a baseline checkpoint whose
/// recorded input hash matches the current data, model and training settings
/// and whose bytes are unchanged.
pub fn run_pipeline(cfg: &PipelineConfig, out: impl AsRef<Path>) -> Result<PipelineOutcome> {
    let mut dir = RunDir::open(out.as_ref())?;
    let mut reused = Vec::new();

    let data = in_stage("data", || {
        let data = prepare_data(cfg)?;
        let all: Vec<SceneSample> = data.train.iter().chain(&data.val).cloned().collect();
        write_dataset(dir.root.join("dataset"), &all)?;
        let input = sha(&[format!("{:?}", cfg.data).as_bytes()]);
        dir.record("data", input, "dataset/manifest.txt", dataset_hash(&all));
        Ok(data)
    })?;

    let data_hash = dir.current[0].1.output.clone();
    let train_input = sha(&[
        data_hash.as_bytes(),
        format!("{:?}|{:?}|{:?}", cfg.features, cfg.train, cfg.loss).as_bytes(),
    ]);
    let (baseline, trace) = in_stage("train", || {
        if let Some(bytes) = dir.reusable("train", &train_input) {
            if let Ok(ckpt) = Checkpoint::decode(&bytes) {
                // trace.csv from the original run stays in place
                reused.push("train".to_string());
                dir.record("train", train_input.clone(), "baseline.csgc", sha(&[&bytes]));
                return Ok((ckpt, Vec::new()));
            }
        }
        let mut net = TinySegNet::<f32>::new(cfg.features, cfg.data.synth.classes, cfg.train.seed)?;
        let trace = train(&mut net, &data.train, &data.val, &cfg.train, &cfg.loss)?;
        dir.write("trace.csv", write_trace_csv(&trace, cfg.data.synth.classes).as_bytes())?;
        let ckpt = net.to_checkpoint();
        let out = dir.write("baseline.csgc", &ckpt.encode())?;
        dir.record("train", train_input.clone(), "baseline.csgc", out);
        Ok((ckpt, trace))
    })?;
    let baseline_hash = dir.current[1].1.output.clone();

    let base_mb = baseline.size_mb();
    let mut rows = vec![in_stage("eval", || eval_row("baseline".into(), &baseline, cfg, &data.val, base_mb))?];

    let pruned = match &cfg.prune {
        None => None,
        Some(p) => Some(in_stage("prune", || {
            let mut amounts = p.extra_amounts.clone();
            amounts.push(p.spec.amount);
            amounts.sort_by(f64::total_cmp);
            amounts.dedup();
            let mut kept = None;
            for amount in amounts {
                let spec = PruneSpec { amount, ..p.spec.clone() };
                let ck = apply_mask(&baseline, &generate_mask(&baseline, &spec)?)?;
                rows.push(eval_row(amount_label(amount), &ck, cfg, &data.val, pruned_size_mb(base_mb, amount))?);
                if amount == p.spec.amount {
                    kept = Some(ck);
                }
            }
            let ck = kept.expect("configured amount is always evaluated");
            let out = dir.write("pruned.csgc", &ck.encode())?;
            dir.write("pruned_sparse.csgc", &sparsify(&ck, &LayerFilter::all())?.encode())?;
            let input = sha(&[baseline_hash.as_bytes(), format!("{:?}", p.spec).as_bytes()]);
            dir.record("prune", input, "pruned.csgc", out.clone());
            Ok((ck, out))
        })?),
    };

    if let Some(filter) = &cfg.quant {
        in_stage("quant", || {
            let q = ptq_checkpoint(&baseline, filter)?;
            let out = dir.write("quantized.csgc", &q.encode())?;
            dir.record("quant", sha(&[baseline_hash.as_bytes(), format!("{filter:?}").as_bytes()]), "quantized.csgc", out);
            rows.push(eval_row("quantized".into(), &q, cfg, &data.val, q.size_mb())?);
            Ok(())
        })?;
        if let Some((pruned, pruned_hash)) = &pruned {
            in_stage("combined", || {
                let q = ptq_checkpoint(pruned, filter)?;
                let out = dir.write("pruned_quantized.csgc", &q.encode())?;
                let input = sha(&[pruned_hash.as_bytes(), format!("{filter:?}").as_bytes()]);
                dir.record("combined", input, "pruned_quantized.csgc", out);
                rows.push(eval_row("pruned+quantized".into(), &q, cfg, &data.val, q.size_mb())?);
                Ok(())
            })?;
        }
    }

    let report = in_stage("report", || {
        let text = format!("{}\n{}", report_table(&rows)?, reference_table());
        dir.write("report.txt", text.as_bytes())?;
        dir.write("report.csv", report_csv(&rows)?.as_bytes())?;
        dir.finish()?;
        Ok(text)
    })?;
    let budget_exceeded = rows.last().is_some_and(|r| r.over_budget);
    Ok(PipelineOutcome {
        rows,
        trace,
        report,
        reused,
        budget_exceeded,
    })
}
