use std::fmt::Write as _;

use super::config::PipelineConfig;
use super::report::{format_pct, relative_change_pct};
use super::run::{prepare_data, PreparedData};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::model::{evaluate, train, TinySegNet};

/// Epochs at the end of a trace whose mIoU spread is reported.
pub const TAIL_EPOCHS: usize = 10;

/// Statistics of one loss over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub loss: LossKind,
    /// Final validation mIoU per seed, in seed order.
    pub final_miou: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub sd: f64,
    /// Mean over seeds of the mean mIoU across the last [`TAIL_EPOCHS`] epochs.
    pub tail_mean: f64,
    /// Mean over seeds of the standard deviation across those epochs.
    pub tail_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one model per `(loss, seed)` pair on identical data per seed.
///
/// Rows follow the fixed report order of [`LossKind::ALL`]; a loss listed
/// twice yields two identical rows.
pub fn loss_sweep(cfg: &PipelineConfig, losses: &[LossKind], seeds: &[u64]) -> Result<SweepReport> {
    if losses.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one loss and one seed"));
    }
    let mut ordered = losses.to_vec();
    ordered.sort_by_key(|k| k.report_rank());
    let data: Vec<(PipelineConfig, PreparedData)> = seeds
        .iter()
        .map(|&s| {
            let c = cfg.clone().with_seed(s);
            prepare_data(&c).map(|d| (c, d))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(ordered.len());
    for &loss in &ordered {
        let spec = LossSpec { kind: loss, ..cfg.loss.clone() };
        let mut finals = Vec::with_capacity(seeds.len());
        let mut tails = Vec::with_capacity(seeds.len());
        for (c, d) in &data {
            let mut net = TinySegNet::<f32>::new(c.features, c.data.synth.classes, c.train.seed)?;
            let trace = train(&mut net, &d.train, &d.val, &c.train, &spec)?;
            let last = match trace.last() {
                Some(r) => r.miou,
                None => evaluate(&net, &d.val, c.train.batch_size)?.miou(c.train.include_background)?,
            };
            finals.push(last);
            let tail: Vec<f64> = trace.iter().rev().take(TAIL_EPOCHS).map(|r| r.miou).collect();
            tails.push(if tail.is_empty() { (last, 0.0) } else { mean_sd(&tail) });
        }
        let (mean, sd) = mean_sd(&finals);
        let k = tails.len() as f64;
        rows.push(SweepRow {
            loss,
            final_miou: finals,
            mean,
            sd,
            tail_mean: tails.iter().map(|t| t.0).sum::<f64>() / k,
            tail_sd: tails.iter().map(|t| t.1).sum::<f64>() / k,
        });
    }
    Ok(SweepReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

impl SweepReport {
    fn mean_of(&self, loss: LossKind) -> Option<f64> {
        self.rows.iter().find(|r| r.loss == loss).map(|r| r.mean)
    }

    /// Whether Focal-Lovász reached at least the cross-entropy mean mIoU;
    /// `None` unless both were swept.
    pub fn focal_lovasz_at_least_ce(&self) -> Option<bool> {
        Some(self.mean_of(LossKind::FocalLovasz)? >= self.mean_of(LossKind::CrossEntropy)?)
    }

    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("seeds: {}\n", seeds.join(", "));
        let _ = writeln!(
            s,
            "{:<14}  {:>9}  {:>6}  {:>13}  {:>11}",
            "Loss", "mIoU mean", "sd", "last-10 mean", "last-10 sd"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14}  {:>9.3}  {:>6.3}  {:>13.3}  {:>11.3}",
                r.loss.to_string(),
                r.mean,
                r.sd,
                r.tail_mean,
                r.tail_sd
            );
        }
        if let (Some(fl), Some(ce)) = (self.mean_of(LossKind::FocalLovasz), self.mean_of(LossKind::CrossEntropy)) {
            let _ = writeln!(
                s,
                "Focal-Lovász >= Cross-entropy: {} ({fl:.3} vs {ce:.3}, {})",
                if fl >= ce { "yes" } else { "no" },
                format_pct(relative_change_pct(fl, ce))
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("loss,mean,sd,tail_mean,tail_sd");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{},{}", r.loss.key(), r.mean, r.sd, r.tail_mean, r.tail_sd);
            for v in &r.final_miou {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}
