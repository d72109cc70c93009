//! Segmentation losses over per-pixel logits.
//!
//! | Function | Value |
//! |---|---|
//! | [`cross_entropy`] | mean of `-log p_t` |
//! | [`focal`] | mean of `-(1-p_t)^γ log p_t` |
//! | [`class_balanced_focal`] | focal with a per-class weight from [`effective_number_weights`] |
//! | [`dice`] | soft Dice, averaged over classes present in the labels |
//! | [`lovasz_softmax`] | Lovász extension of the Jaccard loss, averaged over present classes |
//! | [`focal_lovasz`] | `λ·focal + (1-λ)·lovasz` |
//!
//! Every function returns the value together with its analytic gradient with
//! respect to the logits. Logits are `[N,K,H,W]`, labels `[N,H,W]`.

mod dice;
mod focal;
mod lovasz;

pub use dice::{dice, dice_from_probs};
pub use focal::{class_balanced_focal, cross_entropy, effective_number_weights, focal};
pub use lovasz::{focal_lovasz, lovasz_grad, lovasz_softmax, lovasz_softmax_from_probs};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Loss value and `d value / d logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    CrossEntropy,
    Focal,
    Dice,
    ClassBalancedFocal,
    Lovasz,
    FocalLovasz,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Focal,
        LossKind::Lovasz,
        LossKind::Dice,
        LossKind::ClassBalancedFocal,
        LossKind::FocalLovasz,
        LossKind::CrossEntropy,
    ];

    /// Identifier used in config files.
    pub fn key(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Focal => "focal",
            LossKind::Dice => "dice",
            LossKind::ClassBalancedFocal => "class_balanced_focal",
            LossKind::Lovasz => "lovasz",
            LossKind::FocalLovasz => "focal_lovasz",
        }
    }

    /// Position in comparative reports: Focal, Lovász, Dice, CB Focal,
    /// Focal-Lovász, then the Cross-entropy baseline.
    pub fn report_rank(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "Cross-entropy",
            LossKind::Focal => "Focal",
            LossKind::Dice => "Dice",
            LossKind::ClassBalancedFocal => "CB Focal",
            LossKind::Lovasz => "Lovász",
            LossKind::FocalLovasz => "Focal-Lovász",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cross_entropy" | "ce" => LossKind::CrossEntropy,
            "focal" => LossKind::Focal,
            "dice" => LossKind::Dice,
            "class_balanced_focal" | "cb_focal" | "cbfl" => LossKind::ClassBalancedFocal,
            "lovasz" | "lovasz_softmax" => LossKind::Lovasz,
            "focal_lovasz" => LossKind::FocalLovasz,
            other => return Err(Error::invalid(format!("unknown loss `{other}`"))),
        })
    }
}

/// A loss together with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Focal exponent.
    pub gamma: f64,
    /// Effective-number hyperparameter for class-balanced weights.
    pub beta: f64,
    /// Dice smoothing.
    pub eps: f64,
    /// Focal weight in Focal-Lovász.
    pub lambda: f64,
    /// Per-class weights for class-balanced focal; filled from training-set
    /// pixel counts when `None`.
    pub class_weights: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: 2.0,
            beta: 0.999,
            eps: 1e-6,
            lambda: 0.5,
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0, 1)", self.beta)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps {} must be > 0", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// Fills class-balanced weights from per-class pixel counts if needed.
    pub fn resolve_weights(&mut self, counts: &[u64]) -> Result<()> {
        if self.kind == LossKind::ClassBalancedFocal && self.class_weights.is_none() {
            self.class_weights = Some(effective_number_weights(counts, self.beta)?);
        }
        Ok(())
    }

    pub fn evaluate<T: Real>(&self, logits: &Tensor<T>, labels: &Tensor<i64>) -> Result<LossResult<T>> {
        self.validate()?;
        match self.kind {
            LossKind::CrossEntropy => cross_entropy(logits, labels),
            LossKind::Focal => focal(logits, labels, self.gamma),
            LossKind::Dice => dice(logits, labels, self.eps),
            LossKind::ClassBalancedFocal => {
                let w = self
                    .class_weights
                    .as_deref()
                    .ok_or_else(|| Error::invalid("class-balanced focal weights not resolved"))?;
                class_balanced_focal(logits, labels, self.gamma, w)
            }
            LossKind::Lovasz => lovasz_softmax(logits, labels),
            LossKind::FocalLovasz => focal_lovasz(logits, labels, self.gamma, self.lambda),
        }
    }
}

/// Validated view of a logits/labels pair.
pub(crate) struct PixelLayout {
    pub n: usize,
    pub k: usize,
    pub hw: usize,
}

impl PixelLayout {
    pub fn pixels(&self) -> usize {
        self.n * self.hw
    }

    /// Flat index of class `c` at pixel `p` (pixels enumerate `N*H*W`).
    #[inline]
    pub fn at(&self, p: usize, c: usize) -> usize {
        let (s, px) = (p / self.hw, p % self.hw);
        (s * self.k + c) * self.hw + px
    }
}

pub(crate) fn layout<T: Real>(scores: &Tensor<T>, labels: &Tensor<i64>) -> Result<PixelLayout> {
    let &[n, k, h, w] = scores.shape() else {
        return Err(Error::shape(format!("logits must be [N,K,H,W], got {:?}", scores.shape())));
    };
    if labels.shape() != [n, h, w] {
        return Err(Error::shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            scores.shape()
        )));
    }
    if k < 2 {
        return Err(Error::shape("losses need at least 2 classes"));
    }
    if let Some(&bad) = labels.data().iter().find(|&&l| l < 0 || l as usize >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    Ok(PixelLayout { n, k, hw: h * w })
}

/// Classes that occur at least once in `labels`.
pub(crate) fn present_classes(labels: &Tensor<i64>, k: usize) -> Vec<usize> {
    let mut seen = vec![false; k];
    for &l in labels.data() {
        seen[l as usize] = true;
    }
    (0..k).filter(|&c| seen[c]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_parse_and_order() {
        for k in LossKind::ALL {
            assert_eq!(k.key().parse::<LossKind>().unwrap(), k);
        }
        assert_eq!("cb_focal".parse::<LossKind>().unwrap(), LossKind::ClassBalancedFocal);
        assert!("hinge".parse::<LossKind>().is_err());
        assert_eq!(LossKind::Focal.report_rank(), 0);
        assert_eq!(LossKind::CrossEntropy.report_rank(), 5);
    }

    #[test]
    fn spec_validation() {
        let mut s = LossSpec::new(LossKind::Focal);
        assert!(s.validate().is_ok());
        s.gamma = -1.0;
        assert!(s.validate().is_err());
        let s = LossSpec {
            beta: 1.0,
            ..LossSpec::new(LossKind::Focal)
        };
        assert!(s.validate().is_err());
        let s = LossSpec {
            lambda: 1.5,
            ..LossSpec::new(LossKind::Focal)
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 2]);
        let labels = Tensor::<i64>::new([1, 1, 2], vec![0, 2]).unwrap();
        for kind in LossKind::ALL {
            let mut spec = LossSpec::new(kind);
            spec.class_weights = Some(vec![1.0, 1.0]);
            assert!(matches!(
                spec.evaluate(&logits, &labels),
                Err(Error::LabelOutOfRange { label: 2, .. })
            ));
        }
    }

    #[test]
    fn unresolved_cb_weights_error() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let labels = Tensor::<i64>::zeros([1, 1, 1]);
        let spec = LossSpec::new(LossKind::ClassBalancedFocal);
        assert!(spec.evaluate(&logits, &labels).is_err());
        let mut spec = spec;
        spec.resolve_weights(&[3, 1]).unwrap();
        assert!(spec.evaluate(&logits, &labels).is_ok());
    }
}
