use super::{layout, LossResult};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-pixel softmax pieces for the target class.
struct Target<T> {
    /// `log p_t`
    log_pt: T,
    /// `1 - p_t`, summed from the other classes to keep precision near 1.
    rest: T,
}

/// Fills `probs` with the softmax of the `k` strided logits and returns the
/// target-class terms.
#[inline]
fn softmax_pixel<T: Real>(logits: &[T], idx: impl Fn(usize) -> usize, k: usize, target: usize, probs: &mut [T]) -> Target<T> {
    let m = (1..k).map(&idx).fold(logits[idx(0)], |m, i| m.max(logits[i]));
    let mut z = T::zero();
    for (c, p) in probs.iter_mut().enumerate().take(k) {
        *p = (logits[idx(c)] - m).exp();
        z += *p;
    }
    let mut rest = T::zero();
    for (c, p) in probs.iter_mut().enumerate().take(k) {
        *p /= z;
        if c != target {
            rest += *p;
        }
    }
    Target {
        log_pt: logits[idx(target)] - m - z.ln(),
        rest,
    }
}

/// Focal loss with an optional per-class weight; the shared kernel behind
/// cross-entropy, focal and class-balanced focal.
fn weighted_focal<T: Real>(
    logits: &Tensor<T>,
    labels: &Tensor<i64>,
    gamma: f64,
    weights: Option<&[f64]>,
) -> Result<LossResult<T>> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma {gamma} must be >= 0")));
    }
    let lay = layout(logits, labels)?;
    let inv_n = T::one() / T::of(lay.pixels() as f64);
    let g = T::of(gamma);
    let x = logits.data();
    let mut grad = vec![T::zero(); logits.len()];
    let mut probs = vec![T::zero(); lay.k];
    let mut total = T::zero();

    for (p, &label) in labels.data().iter().enumerate() {
        let t = label as usize;
        let w = match weights {
            None => T::one(),
            Some(ws) => match ws.get(t) {
                Some(&w) if w > 0.0 => T::of(w),
                _ => {
                    return Err(Error::invalid(format!(
                        "no class weight for observed label {t}"
                    )))
                }
            },
        };
        let tg = softmax_pixel(x, |c| lay.at(p, c), lay.k, t, &mut probs);
        let pt = tg.log_pt.exp();
        let modulator = if gamma == 0.0 { T::one() } else { tg.rest.powf(g) };
        total += w * -(modulator * tg.log_pt);

        // dL/dz_j = A (delta_jt - p_j), A = gamma q^(gamma-1) p_t log p_t - q^gamma
        let slope = if gamma == 0.0 || tg.rest == T::zero() {
            T::zero()
        } else {
            g * tg.rest.powf(g - T::one()) * pt * tg.log_pt
        };
        let a = w * (slope - modulator) * inv_n;
        for c in 0..lay.k {
            let delta = if c == t { T::one() } else { T::zero() };
            grad[lay.at(p, c)] = a * (delta - probs[c]);
        }
    }

    Ok(LossResult {
        value: total * inv_n,
        grad: Tensor::new(logits.shape(), grad)?,
    })
}

/// Mean over pixels of `-log p_t`; gradient `(softmax - onehot) / pixels`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &Tensor<i64>) -> Result<LossResult<T>> {
    let lay = layout(logits, labels)?;
    let inv_n = T::one() / T::of(lay.pixels() as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut probs = vec![T::zero(); lay.k];
    let mut total = T::zero();
    for (p, &label) in labels.data().iter().enumerate() {
        let t = label as usize;
        let tg = softmax_pixel(logits.data(), |c| lay.at(p, c), lay.k, t, &mut probs);
        total -= tg.log_pt;
        for c in 0..lay.k {
            let onehot = if c == t { T::one() } else { T::zero() };
            grad[lay.at(p, c)] = (probs[c] - onehot) * inv_n;
        }
    }
    Ok(LossResult {
        value: total * inv_n,
        grad: Tensor::new(logits.shape(), grad)?,
    })
}

/// Mean over pixels of `-(1 - p_t)^gamma log p_t`.
pub fn focal<T: Real>(logits: &Tensor<T>, labels: &Tensor<i64>, gamma: f64) -> Result<LossResult<T>> {
    weighted_focal(logits, labels, gamma, None)
}

/// Focal loss with each pixel scaled by the weight of its ground-truth class.
pub fn class_balanced_focal<T: Real>(
    logits: &Tensor<T>,
    labels: &Tensor<i64>,
    gamma: f64,
    weights: &[f64],
) -> Result<LossResult<T>> {
    weighted_focal(logits, labels, gamma, Some(weights))
}

/// Class weights from the effective number of samples
/// `E_c = (1 - beta^n_c) / (1 - beta)`.
///
/// Weights are proportional to `1 / E_c` and normalised so they sum to the
/// number of classes with `n_c > 0`; absent classes get weight 0.
pub fn effective_number_weights(counts: &[u64], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1)")));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                let effective = (1.0 - beta.powf(n as f64)) / (1.0 - beta);
                1.0 / effective
            }
        })
        .collect();
    let present = counts.iter().filter(|&&n| n > 0).count();
    let sum: f64 = raw.iter().sum();
    if present == 0 {
        return Ok(raw);
    }
    Ok(raw.iter().map(|w| w * present as f64 / sum).collect())
}
