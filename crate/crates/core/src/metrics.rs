//! Confusion matrix, per-class IoU and mIoU.
//!
//! The matrix is pooled over the whole evaluated set; mIoU is the mean of the
//! per-class IoU over classes whose union is non-empty.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `K x K` pixel counts; entry `(g, p)` counts pixels with ground truth `g`
/// predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one batch of label/prediction maps (any equal shapes).
    pub fn update(&mut self, labels: &[i64], predictions: &[i64]) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(format!(
                "labels ({}) and predictions ({}) differ in size",
                labels.len(),
                predictions.len()
            )));
        }
        let k = self.classes;
        let check = |v: i64| {
            usize::try_from(v)
                .ok()
                .filter(|&c| c < k)
                .ok_or(Error::LabelOutOfRange { label: v, classes: k })
        };
        // validate first so a bad batch leaves the matrix untouched
        for (&g, &p) in labels.iter().zip(predictions) {
            check(g)?;
            check(p)?;
        }
        for (&g, &p) in labels.iter().zip(predictions) {
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merging confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union, optionally skipping class 0.
    pub fn miou(&self, include_background: bool) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::invalid("mIoU of an empty confusion matrix"));
        }
        let skip = usize::from(!include_background);
        let ious: Vec<f64> = self.iou_per_class().into_iter().skip(skip).flatten().collect();
        if ious.is_empty() {
            return Err(Error::invalid("no class with a non-empty union"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Per-pixel argmax over the channel axis of `[N,K,H,W]` scores; ties go to
/// the lowest class index.
pub fn argmax_channels<T: Real>(scores: &Tensor<T>) -> Result<Tensor<i64>> {
    let &[n, k, h, w] = scores.shape() else {
        return Err(Error::shape(format!("argmax expects [N,K,H,W], got {:?}", scores.shape())));
    };
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        let base = &scores.data()[s * k * hw..(s + 1) * k * hw];
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if base[c * hw + px] > base[best * hw + px] {
                    best = c;
                }
            }
            out.push(best as i64);
        }
    }
    Tensor::new([n, h, w], out)
}
