use std::cmp::Ordering;

use super::{focal, layout, present_classes, LossResult};
use crate::error::{Error, Result};
use crate::tensor::ops::{softmax_channels, softmax_channels_backward};
use crate::tensor::{Real, Tensor};

/// Gradient of the Lovász extension of the Jaccard loss at a sorted error
/// vector, given the ground truth in the same (descending-error) order.
///
/// With `P = Σ gt`: `inter_j = P - cumsum(gt)_j`, `union_j = P + cumsum(1-gt)_j`,
/// `jacc_j = 1 - inter_j / union_j`, and the result is the first difference of
/// `jacc`. Fails when `P = 0`.
pub fn lovasz_grad<T: Real>(gt_sorted: &[bool]) -> Result<Vec<T>> {
    let positives = gt_sorted.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Err(Error::invalid("lovasz_grad: class absent from ground truth"));
    }
    let p = T::of(positives as f64);
    let mut seen_fg = T::zero();
    let mut seen_bg = T::zero();
    let mut prev = T::zero();
    let mut out = Vec::with_capacity(gt_sorted.len());
    for &g in gt_sorted {
        if g {
            seen_fg += T::one();
        } else {
            seen_bg += T::one();
        }
        let jacc = T::one() - (p - seen_fg) / (p + seen_bg);
        out.push(jacc - prev);
        prev = jacc;
    }
    Ok(out)
}

/// Lovász-softmax on probabilities; returns the value and `d value / d probs`.
///
/// For each class present in `labels`, errors `|g - p|` over all pixels are
/// sorted in descending order (ties by pixel index) and dotted with
/// [`lovasz_grad`]. The value is the mean over present classes.
pub fn lovasz_softmax_from_probs<T: Real>(probs: &Tensor<T>, labels: &Tensor<i64>) -> Result<LossResult<T>> {
    let lay = layout(probs, labels)?;
    let present = present_classes(labels, lay.k);
    let inv_c = T::one() / T::of(present.len() as f64);
    let p = probs.data();
    let npix = lay.pixels();
    let mut grad = vec![T::zero(); probs.len()];
    let mut total = T::zero();
    let mut errors = vec![T::zero(); npix];
    let mut order: Vec<usize> = Vec::with_capacity(npix);
    let mut gt_sorted = Vec::with_capacity(npix);

    for &c in &present {
        for (px, &l) in labels.data().iter().enumerate() {
            let v = p[lay.at(px, c)];
            errors[px] = if l as usize == c { T::one() - v } else { v }.abs();
        }
        order.clear();
        order.extend(0..npix);
        order.sort_by(|&a, &b| {
            errors[b]
                .partial_cmp(&errors[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        gt_sorted.clear();
        gt_sorted.extend(order.iter().map(|&px| labels.data()[px] as usize == c));
        let g = lovasz_grad::<T>(&gt_sorted)?;

        let mut loss_c = T::zero();
        for (rank, &px) in order.iter().enumerate() {
            loss_c += errors[px] * g[rank];
            // d|g - p| / dp = -1 on foreground, +1 on background
            let sign = if gt_sorted[rank] { -T::one() } else { T::one() };
            grad[lay.at(px, c)] = sign * g[rank] * inv_c;
        }
        total += loss_c;
    }

    Ok(LossResult {
        value: total * inv_c,
        grad: Tensor::new(probs.shape(), grad)?,
    })
}

/// Lovász-softmax loss on the softmax of `logits`.
pub fn lovasz_softmax<T: Real>(logits: &Tensor<T>, labels: &Tensor<i64>) -> Result<LossResult<T>> {
    let probs = softmax_channels(logits)?;
    let r = lovasz_softmax_from_probs(&probs, labels)?;
    Ok(LossResult {
        value: r.value,
        grad: softmax_channels_backward(&probs, &r.grad)?,
    })
}

/// `lambda * focal + (1 - lambda) * lovasz_softmax`, value and gradient.
pub fn focal_lovasz<T: Real>(logits: &Tensor<T>, labels: &Tensor<i64>, gamma: f64, lambda: f64) -> Result<LossResult<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    // endpoints return a single component untouched
    if lambda == 1.0 {
        return focal(logits, labels, gamma);
    }
    if lambda == 0.0 {
        return lovasz_softmax(logits, labels);
    }
    let f = focal(logits, labels, gamma)?;
    let l = lovasz_softmax(logits, labels)?;
    let (a, b) = (T::of(lambda), T::of(1.0 - lambda));
    let grad = f
        .grad
        .data()
        .iter()
        .zip(l.grad.data())
        .map(|(&x, &y)| a * x + b * y)
        .collect();
    Ok(LossResult {
        value: a * f.value + b * l.value,
        grad: Tensor::new(logits.shape(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_small_cases() {
        assert_eq!(lovasz_grad::<f64>(&[true]).unwrap(), vec![1.0]);
        assert_eq!(lovasz_grad::<f64>(&[true, false]).unwrap(), vec![1.0, 0.0]);
        assert!(lovasz_grad::<f64>(&[false, false]).is_err());
    }

    #[test]
    fn grad_sums_to_final_jaccard() {
        let gt = [false, true, true, false, true, false];
        let g = lovasz_grad::<f64>(&gt).unwrap();
        // all pixels mispredicted: prediction = complement of gt, IoU 0
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_probabilities_have_zero_loss() {
        let labels = Tensor::<i64>::new([1, 2, 2], vec![0, 1, 1, 2]).unwrap();
        let mut p = vec![0.0f64; 12];
        for (i, &l) in labels.data().iter().enumerate() {
            p[l as usize * 4 + i] = 1.0;
        }
        let probs = Tensor::new([1, 3, 2, 2], p).unwrap();
        assert_eq!(lovasz_softmax_from_probs(&probs, &labels).unwrap().value, 0.0);
    }

    #[test]
    fn focal_lovasz_endpoints_and_midpoint() {
        let logits = Tensor::<f64>::new([1, 3, 1, 3], vec![0.1, 0.5, -0.3, 1.0, -1.0, 0.2, 0.0, 0.3, 0.7]).unwrap();
        let labels = Tensor::<i64>::new([1, 1, 3], vec![0, 1, 2]).unwrap();
        let f = focal(&logits, &labels, 2.0).unwrap();
        let l = lovasz_softmax(&logits, &labels).unwrap();
        assert_eq!(focal_lovasz(&logits, &labels, 2.0, 1.0).unwrap(), f);
        assert_eq!(focal_lovasz(&logits, &labels, 2.0, 0.0).unwrap(), l);
        let mid = focal_lovasz(&logits, &labels, 2.0, 0.5).unwrap();
        assert!((mid.value - 0.5 * (f.value + l.value)).abs() < 1e-15);
        assert!(focal_lovasz(&logits, &labels, 2.0, 1.5).is_err());
    }
}
