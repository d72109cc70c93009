//! Post-training affine quantization to uint8.
//!
//! A float is stored as `q = clamp(round(w / scale) + zero_point, 0, 255)` and
//! reconstructed as `(q - zero_point) * scale`. Calibration is per tensor,
//! min-max, with the range widened to include zero so that exact zeros (for
//! example pruned weights) stay exact.

use crate::checkpoint::{Checkpoint, EntryValue};
use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, Tensor};

/// Largest inner dimension for which the i32 accumulator cannot overflow:
/// `2^15 * 255 * 255 < 2^31`.
pub const MAX_INNER_DIM: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale {} must be finite and > 0", self.scale)));
        }
        if !(0..=255).contains(&self.zero_point) {
            return Err(Error::invalid(format!("zero_point {} outside [0, 255]", self.zero_point)));
        }
        Ok(())
    }

    /// Quantizes one value. Rounding is half away from zero; out-of-range
    /// values saturate.
    #[inline]
    pub fn quantize_value(&self, w: f32) -> u8 {
        let q = (w as f64 / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize_value(&self, q: u8) -> f32 {
        (q as i32 - self.zero_point) as f32 * self.scale
    }

    /// The real number a code stands for, evaluated exactly in f64.
    pub fn represented(&self, q: u8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale as f64
    }
}

/// A uint8 payload with its affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub payload: Tensor<u8>,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(payload: Tensor<u8>, params: QuantParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { payload, params })
    }

    pub fn shape(&self) -> &[usize] {
        self.payload.shape()
    }
}

/// Min-max calibration over `[min(w, 0), max(w, 0)]`.
///
/// `scale = (max - min) / 255` rounded up to the next f32,
/// `zero_point = round(-min / scale)`; an all-zero tensor gets
/// `scale = 1, zero_point = 0`.
pub fn calibrate_minmax(w: &[f32]) -> Result<QuantParams> {
    if w.is_empty() {
        return Err(Error::invalid("calibrate_minmax on an empty tensor"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration input".into()));
    }
    let lo = w.iter().copied().fold(0f32, f32::min) as f64;
    let hi = w.iter().copied().fold(0f32, f32::max) as f64;
    if hi == lo {
        return Ok(QuantParams {
            scale: 1.0,
            zero_point: 0,
        });
    }
    let exact = (hi - lo) / 255.0;
    // never below the exact step, so the grid spans [lo, hi] to within scale/2
    let mut scale = exact as f32;
    if (scale as f64) < exact {
        scale = scale.next_up();
    }
    // from the exact ratio so that [-1, 1] lands on round(127.5) = 128
    let zero_point = (-lo * 255.0 / (hi - lo)).round().clamp(0.0, 255.0) as i32;
    Ok(QuantParams { scale, zero_point })
}

pub fn quantize(w: &Tensor<f32>, params: QuantParams) -> Result<QuantizedTensor> {
    params.validate()?;
    QuantizedTensor::new(w.map(|v| params.quantize_value(v)), params)
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    q.payload.map(|v| q.params.dequantize_value(v))
}

/// `A [M,K] x B [K,N]` with i32 accumulation of `(a - zpA)(b - zpB)`, scaled
/// by `scaleA * scaleB` at the end.
pub fn quantized_matmul(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<Tensor<f32>> {
    let (&[m, k], &[kb, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!(
            "quantized_matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != kb {
        return Err(Error::shape(format!("inner dimensions differ: {k} vs {kb}")));
    }
    if k > MAX_INNER_DIM {
        return Err(Error::invalid(format!(
            "inner dimension {k} exceeds {MAX_INNER_DIM}; i32 accumulator could overflow"
        )));
    }
    let za = a.params.zero_point;
    let zb = b.params.zero_point;
    let av: Vec<i32> = a.payload.data().iter().map(|&v| v as i32 - za).collect();
    let bv: Vec<i32> = b.payload.data().iter().map(|&v| v as i32 - zb).collect();
    let mut acc = vec![0i32; m * n];
    for i in 0..m {
        let row = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            for (r, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                *r += x * y;
            }
        }
    }
    let s = a.params.scale as f64 * b.params.scale as f64;
    Tensor::new([m, n], acc.iter().map(|&v| (v as f64 * s) as f32).collect())
}

/// Which checkpoint entries to quantize.
///
/// Patterns are exact names, `prefix*` or `*`; an empty filter selects nothing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerFilter {
    patterns: Vec<String>,
}

impl LayerFilter {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        Self {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn all() -> Self {
        Self::new(["*"])
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| match p.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => p == name,
        })
    }
}

/// Replaces every selected f32 entry with its min-max quantized form.
/// Selecting an entry that is not dense f32 is an error.
pub fn ptq_checkpoint(ckpt: &Checkpoint, filter: &LayerFilter) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    for e in ckpt.entries() {
        let value = if filter.matches(&e.name) {
            match &e.value {
                EntryValue::Float(AnyTensor::F32(t)) => {
                    let params = calibrate_minmax(t.data())?;
                    EntryValue::Quantized(quantize(t, params)?)
                }
                EntryValue::Quantized(_) => {
                    return Err(Error::invalid(format!("entry `{}` is already quantized", e.name)))
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "entry `{}` is not a dense f32 tensor",
                        e.name
                    )))
                }
            }
        } else {
            e.value.clone()
        };
        out.push(e.name.clone(), value)?;
    }
    Ok(out)
}

/// Size of a (possibly quantized) checkpoint in MB.
pub fn quant_size_mb(ckpt: &Checkpoint) -> f64 {
    ckpt.size_mb()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_examples() {
        let p = calibrate_minmax(&[0.0, 0.7, 2.0]).unwrap();
        assert_eq!(p.scale, (2.0f64 / 255.0) as f32);
        assert_eq!(p.zero_point, 0);

        let p = calibrate_minmax(&[-1.0, 0.3, 1.0]).unwrap();
        assert_eq!(p.scale, (2.0f64 / 255.0) as f32);
        assert_eq!(p.zero_point, 128);

        let p = calibrate_minmax(&[0.0; 5]).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
        assert_eq!(p.dequantize_value(p.quantize_value(0.0)), 0.0);

        assert!(calibrate_minmax(&[]).is_err());
        assert!(calibrate_minmax(&[1.0, f32::NAN]).is_err());
    }

    #[test]
    fn constant_tensor_maps_back_to_itself() {
        for c in [0.0f32, 3.0, -2.5, 0.1] {
            let w = Tensor::full([4], c);
            let p = calibrate_minmax(w.data()).unwrap();
            let back = dequantize(&quantize(&w, p).unwrap());
            for &v in back.data() {
                assert!((v - c).abs() <= p.scale / 2.0, "constant {c} -> {v}");
            }
        }
    }

    #[test]
    fn reconstruction_formula() {
        let p = QuantParams { scale: 0.5, zero_point: 10 };
        assert_eq!(p.dequantize_value(130), 60.0);
    }

    #[test]
    fn half_tie_near_one() {
        // 1 / fl32(2/255) = 127.49999924..., so the code is 127 and the
        // reconstruction error stays strictly below scale / 2
        let p = QuantParams { scale: (2.0f64 / 255.0) as f32, zero_point: 0 };
        let q = p.quantize_value(1.0);
        assert_eq!(q, 127);
        let err = (1.0 - p.represented(q)).abs();
        assert!(err < p.scale as f64 / 2.0);
        assert!((err - 0.00392).abs() < 1e-5);
        // exact ties round away from zero
        let p = QuantParams { scale: 0.5, zero_point: 100 };
        assert_eq!(p.quantize_value(0.25), 101);
        assert_eq!(p.quantize_value(-0.25), 99);
    }

    #[test]
    fn saturation() {
        let p = QuantParams { scale: 1.0, zero_point: 0 };
        assert_eq!(p.quantize_value(1e9), 255);
        assert_eq!(p.quantize_value(-5.0), 0);
    }

    #[test]
    fn matmul_errors_and_zero() {
        let z = |shape: [usize; 2]| QuantizedTensor::new(Tensor::full(shape, 7u8), QuantParams { scale: 0.1, zero_point: 7 }).unwrap();
        let out = quantized_matmul(&z([2, 3]), &z([3, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(quantized_matmul(&z([2, 3]), &z([2, 4])).is_err());
        let big = |shape: [usize; 2]| QuantizedTensor::new(Tensor::zeros(shape), QuantParams { scale: 1.0, zero_point: 0 }).unwrap();
        assert!(quantized_matmul(&big([1, MAX_INNER_DIM + 1]), &big([MAX_INNER_DIM + 1, 1])).is_err());
    }

    #[test]
    fn layer_filter_patterns() {
        let f = LayerFilter::new(["enc1.weight", "down*"]);
        assert!(f.matches("enc1.weight"));
        assert!(f.matches("down.bias"));
        assert!(!f.matches("enc1.bias"));
        assert!(LayerFilter::all().matches("anything"));
        assert!(!LayerFilter::default().matches("anything"));
    }

    #[test]
    fn ptq_selects_and_rejects() {
        let mut c = Checkpoint::new();
        c.push("w", EntryValue::Float(Tensor::<f32>::new([4], vec![-1.0, 0.0, 0.5, 1.0]).unwrap().into()))
            .unwrap();
        c.push("b", EntryValue::Float(Tensor::<f32>::zeros([2]).into())).unwrap();
        let none = ptq_checkpoint(&c, &LayerFilter::default()).unwrap();
        assert_eq!(none, c);
        assert_eq!(quant_size_mb(&none), c.size_mb());

        let only_w = ptq_checkpoint(&c, &LayerFilter::new(["w"])).unwrap();
        assert!(matches!(only_w.get("w"), Some(EntryValue::Quantized(_))));
        assert!(matches!(only_w.get("b"), Some(EntryValue::Float(_))));
        assert_eq!(only_w.storage_bytes(), 4 + 8 + 8);

        assert!(ptq_checkpoint(&only_w, &LayerFilter::new(["w"])).is_err());
    }
}
