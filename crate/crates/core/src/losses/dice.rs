use super::{layout, present_classes, LossResult};
use crate::error::{Error, Result};
use crate::tensor::ops::{softmax_channels, softmax_channels_backward};
use crate::tensor::{Real, Tensor};

/// Soft Dice on probabilities; returns the value and `d value / d probs`.
///
/// Per class `c`: `1 - (2 Σ p g + eps) / (Σ p + Σ g + eps)`, averaged over
/// the classes present in `labels`. Sums run over every pixel of the batch.
pub fn dice_from_probs<T: Real>(probs: &Tensor<T>, labels: &Tensor<i64>, eps: f64) -> Result<LossResult<T>> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("dice eps {eps} must be > 0")));
    }
    let lay = layout(probs, labels)?;
    let present = present_classes(labels, lay.k);
    let eps = T::of(eps);
    let inv_c = T::one() / T::of(present.len() as f64);
    let p = probs.data();
    let mut grad = vec![T::zero(); probs.len()];
    let mut total = T::zero();

    for &c in &present {
        let mut inter = T::zero();
        let mut sum_p = T::zero();
        let mut sum_g = T::zero();
        for (px, &l) in labels.data().iter().enumerate() {
            let v = p[lay.at(px, c)];
            sum_p += v;
            if l as usize == c {
                inter += v;
                sum_g += T::one();
            }
        }
        let num = T::of(2.0) * inter + eps;
        let den = sum_p + sum_g + eps;
        total += T::one() - num / den;
        // d/dp_i of -(num/den) = -(2 g_i den - num) / den^2
        let den2 = den * den;
        for (px, &l) in labels.data().iter().enumerate() {
            let g = if l as usize == c { T::of(2.0) } else { T::zero() };
            grad[lay.at(px, c)] = -(g * den - num) / den2 * inv_c;
        }
    }

    Ok(LossResult {
        value: total * inv_c,
        grad: Tensor::new(probs.shape(), grad)?,
    })
}

/// Soft Dice loss on softmax probabilities of `logits`.
pub fn dice<T: Real>(logits: &Tensor<T>, labels: &Tensor<i64>, eps: f64) -> Result<LossResult<T>> {
    let probs = softmax_channels(logits)?;
    let r = dice_from_probs(&probs, labels, eps)?;
    Ok(LossResult {
        value: r.value,
        grad: softmax_channels_backward(&probs, &r.grad)?,
    })
}
