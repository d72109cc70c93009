//! Pruning masks (random/L1 unstructured, random/Ln structured), mask
//! application, sparsity and size accounting, and a sparse tensor encoding.
//!
//! Masks are per tensor (no global ranking across layers). Structured methods
//! remove whole output channels, i.e. slices along axis 0.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, EntryValue};
use crate::error::{Error, Result};
use crate::quant::LayerFilter;
use crate::tensor::{AnyTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    RandomUnstructured,
    L1Unstructured,
    RandomStructured,
    LnStructured,
}

impl PruneMethod {
    pub fn key(self) -> &'static str {
        match self {
            PruneMethod::RandomUnstructured => "random_unstructured",
            PruneMethod::L1Unstructured => "l1_unstructured",
            PruneMethod::RandomStructured => "random_structured",
            PruneMethod::LnStructured => "ln_structured",
        }
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "random_unstructured" => PruneMethod::RandomUnstructured,
            "l1_unstructured" => PruneMethod::L1Unstructured,
            "random_structured" => PruneMethod::RandomStructured,
            "ln_structured" => PruneMethod::LnStructured,
            other => return Err(Error::invalid(format!("unknown pruning method `{other}`"))),
        })
    }
}

/// Tensors left dense unless the exemption list is overridden. Both are small
/// and carry a disproportionate share of the accuracy.
pub const DEFAULT_EXEMPT: [&str; 2] = ["enc1.weight", "head.weight"];

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSpec {
    pub method: PruneMethod,
    /// Fraction of each target tensor to zero.
    pub amount: f64,
    /// Norm order for [`PruneMethod::LnStructured`].
    pub norm: f64,
    pub seed: u64,
    /// Entries never pruned: the input stem and the classifier head by default.
    pub exempt: LayerFilter,
    /// Also prune 1-D tensors (biases) with unstructured methods.
    pub include_biases: bool,
}

impl PruneSpec {
    pub fn new(method: PruneMethod, amount: f64) -> Self {
        Self {
            method,
            amount,
            norm: 2.0,
            seed: 0,
            exempt: LayerFilter::new(DEFAULT_EXEMPT),
            include_biases: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_amount(self.amount)?;
        if !(self.norm >= 1.0) {
            return Err(Error::invalid(format!("norm order {} must be >= 1", self.norm)));
        }
        Ok(())
    }

    fn targets(&self, name: &str, t: &Tensor<f32>) -> bool {
        !self.exempt.matches(name) && (t.ndim() >= 2 || (self.include_biases && !self.method.is_structured()))
    }
}

impl PruneMethod {
    fn is_structured(self) -> bool {
        matches!(self, PruneMethod::RandomStructured | PruneMethod::LnStructured)
    }
}

fn check_amount(amount: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&amount) {
        return Err(Error::invalid(format!("pruning amount {amount} outside [0, 1]")));
    }
    Ok(())
}

/// Number of entries zeroed by unstructured pruning: `floor(amount * n)`.
///
/// A 1e-9 nudge keeps decimal amounts such as 0.29 from losing an element to
/// binary rounding (0.29 * 100 = 28.999999999999996).
pub fn unstructured_count(amount: f64, n: usize) -> usize {
    ((amount * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Number of channels removed by structured pruning: `round(amount * c)`.
pub fn structured_count(amount: f64, channels: usize) -> usize {
    ((amount * channels as f64).round() as usize).min(channels)
}

fn mask_from_zeros(shape: &[usize], zeros: impl IntoIterator<Item = usize>) -> Result<Tensor<u8>> {
    let mut m = Tensor::full(shape.to_vec(), 1u8);
    for i in zeros {
        m.data_mut()[i] = 0;
    }
    Ok(m)
}

/// Zeros the `floor(amount * N)` entries of smallest magnitude; ties go to the
/// lower flat index.
pub fn l1_unstructured_mask(w: &Tensor<f32>, amount: f64) -> Result<Tensor<u8>> {
    check_amount(amount)?;
    let k = unstructured_count(amount, w.len());
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        w.data()[a]
            .abs()
            .partial_cmp(&w.data()[b].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    mask_from_zeros(w.shape(), order.into_iter().take(k))
}

/// Zeros `floor(amount * N)` entries chosen uniformly at random.
pub fn random_unstructured_mask(w: &Tensor<f32>, amount: f64, seed: u64) -> Result<Tensor<u8>> {
    check_amount(amount)?;
    let k = unstructured_count(amount, w.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_from_zeros(w.shape(), index::sample(&mut rng, w.len(), k))
}

fn channel_layout(w: &Tensor<f32>) -> Result<(usize, usize)> {
    match w.shape() {
        [c, rest @ ..] if !rest.is_empty() => Ok((*c, rest.iter().product())),
        s => Err(Error::shape(format!("structured pruning needs an output-channel axis, got {s:?}"))),
    }
}

fn channel_mask(w: &Tensor<f32>, per_channel: usize, channels: impl IntoIterator<Item = usize>) -> Result<Tensor<u8>> {
    mask_from_zeros(
        w.shape(),
        channels
            .into_iter()
            .flat_map(|c| c * per_channel..(c + 1) * per_channel),
    )
}

/// Zeros `round(amount * C)` output channels chosen uniformly at random.
pub fn random_structured_mask(w: &Tensor<f32>, amount: f64, seed: u64) -> Result<Tensor<u8>> {
    check_amount(amount)?;
    let (c, per) = channel_layout(w)?;
    let k = structured_count(amount, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    channel_mask(w, per, index::sample(&mut rng, c, k))
}

/// Zeros the `round(amount * C)` output channels of smallest Ln norm; ties go
/// to the lower channel index.
pub fn ln_structured_mask(w: &Tensor<f32>, amount: f64, n: f64) -> Result<Tensor<u8>> {
    check_amount(amount)?;
    if !(n >= 1.0) {
        return Err(Error::invalid(format!("norm order {n} must be >= 1")));
    }
    let (c, per) = channel_layout(w)?;
    let norms: Vec<f64> = w
        .data()
        .chunks_exact(per)
        .map(|ch| ch.iter().map(|&v| (v.abs() as f64).powf(n)).sum::<f64>().powf(1.0 / n))
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    channel_mask(w, per, order.into_iter().take(structured_count(amount, c)))
}

/// Per-tensor binary masks, 0 = pruned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneMask {
    pub masks: Vec<(String, Tensor<u8>)>,
}

impl PruneMask {
    pub fn get(&self, name: &str) -> Option<&Tensor<u8>> {
        self.masks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Fraction of zeros over all masked tensors.
    pub fn zero_fraction(&self) -> f64 {
        let total: usize = self.masks.iter().map(|(_, m)| m.len()).sum();
        let zeros: usize = self
            .masks
            .iter()
            .map(|(_, m)| m.data().iter().filter(|&&v| v == 0).count())
            .sum();
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }
}

/// Builds masks for every target entry of `ckpt` (dense f32, not exempt).
pub fn generate_mask(ckpt: &Checkpoint, spec: &PruneSpec) -> Result<PruneMask> {
    spec.validate()?;
    let mut masks = Vec::new();
    for (i, e) in ckpt.entries().iter().enumerate() {
        let EntryValue::Float(AnyTensor::F32(w)) = &e.value else {
            continue;
        };
        if !spec.targets(&e.name, w) {
            continue;
        }
        // independent stream per entry position
        let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        let m = match spec.method {
            PruneMethod::L1Unstructured => l1_unstructured_mask(w, spec.amount)?,
            PruneMethod::RandomUnstructured => random_unstructured_mask(w, spec.amount, seed)?,
            PruneMethod::RandomStructured => random_structured_mask(w, spec.amount, seed)?,
            PruneMethod::LnStructured => ln_structured_mask(w, spec.amount, spec.norm)?,
        };
        masks.push((e.name.clone(), m));
    }
    Ok(PruneMask { masks })
}

/// Multiplies each masked entry by its mask. Idempotent.
pub fn apply_mask(ckpt: &Checkpoint, mask: &PruneMask) -> Result<Checkpoint> {
    for (name, _) in &mask.masks {
        if ckpt.get(name).is_none() {
            return Err(Error::shape(format!("mask for unknown entry `{name}`")));
        }
    }
    let mut out = Checkpoint::new();
    for e in ckpt.entries() {
        let value = match mask.get(&e.name) {
            None => e.value.clone(),
            Some(m) => {
                let EntryValue::Float(AnyTensor::F32(w)) = &e.value else {
                    return Err(Error::invalid(format!("cannot mask non-f32 entry `{}`", e.name)));
                };
                if m.shape() != w.shape() {
                    return Err(Error::shape(format!(
                        "mask {:?} vs entry `{}` {:?}",
                        m.shape(),
                        e.name,
                        w.shape()
                    )));
                }
                let data = w
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(&v, &k)| if k == 0 { 0.0 } else { v })
                    .collect();
                EntryValue::Float(Tensor::new(w.shape(), data)?.into())
            }
        };
        out.push(e.name.clone(), value)?;
    }
    Ok(out)
}

/// Fraction of exactly-zero parameters over the whole checkpoint.
pub fn sparsity(ckpt: &Checkpoint) -> Result<f64> {
    let mut zeros = 0usize;
    let mut total = 0usize;
    for e in ckpt.entries() {
        let dense = ckpt.dense_f32(&e.name)?;
        zeros += dense.data().iter().filter(|&&v| v == 0.0).count();
        total += dense.len();
    }
    Ok(if total == 0 { 0.0 } else { zeros as f64 / total as f64 })
}

/// Size after pruning a fraction `amount` of the model: `dense_mb * (1 - amount)`.
pub fn pruned_size_mb(dense_mb: f64, amount: f64) -> f64 {
    dense_mb * (1.0 - amount)
}

/// Coordinate-format tensor: ascending flat indices with their f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    shape: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseTensor {
    pub fn new(shape: Vec<usize>, indices: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel > u32::MAX as usize + 1 {
            return Err(Error::shape("sparse tensor too large for u32 indices"));
        }
        if indices.len() != values.len() {
            return Err(Error::shape("sparse indices and values differ in length"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Malformed("sparse indices must be strictly ascending".into()));
        }
        if indices.last().is_some_and(|&i| i as usize >= numel) {
            return Err(Error::Malformed("sparse index out of range".into()));
        }
        Ok(Self { shape, indices, values })
    }

    pub fn from_dense(t: &Tensor<f32>) -> Result<Self> {
        let (indices, values) = t
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32, v))
            .unzip();
        Self::new(t.shape().to_vec(), indices, values)
    }

    pub fn to_dense(&self) -> Result<Tensor<f32>> {
        let mut t = Tensor::zeros(self.shape.clone());
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            t.data_mut()[i as usize] = v;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Re-encodes selected dense f32 entries sparsely when that is smaller.
pub fn sparsify(ckpt: &Checkpoint, filter: &LayerFilter) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    for e in ckpt.entries() {
        let value = match &e.value {
            EntryValue::Float(AnyTensor::F32(t)) if filter.matches(&e.name) => {
                let s = SparseTensor::from_dense(t)?;
                let sparse = EntryValue::Sparse(s);
                if sparse.storage_bytes() < e.value.storage_bytes() {
                    sparse
                } else {
                    e.value.clone()
                }
            }
            other => other.clone(),
        };
        out.push(e.name.clone(), value)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_of(m: &Tensor<u8>) -> Vec<usize> {
        m.data().iter().enumerate().filter(|(_, &v)| v == 0).map(|(i, _)| i).collect()
    }

    #[test]
    fn l1_hand_example() {
        let w = Tensor::new([4], vec![0.1f32, -0.5, 0.3, -0.2]).unwrap();
        assert_eq!(zeros_of(&l1_unstructured_mask(&w, 0.5).unwrap()), vec![0, 3]);
        assert!(zeros_of(&l1_unstructured_mask(&w, 0.0).unwrap()).is_empty());
        assert_eq!(zeros_of(&l1_unstructured_mask(&w, 1.0).unwrap()).len(), 4);
        assert!(l1_unstructured_mask(&w, 1.1).is_err());
    }

    #[test]
    fn l1_ties_go_to_lower_index() {
        let w = Tensor::new([4], vec![0.2f32, -0.2, 0.2, 0.1]).unwrap();
        assert_eq!(zeros_of(&l1_unstructured_mask(&w, 0.5).unwrap()), vec![0, 3]);
    }

    #[test]
    fn random_unstructured_is_seeded() {
        let w = Tensor::full([10, 10], 1.0f32);
        let a = random_unstructured_mask(&w, 0.37, 4).unwrap();
        assert_eq!(a, random_unstructured_mask(&w, 0.37, 4).unwrap());
        assert_ne!(a, random_unstructured_mask(&w, 0.37, 5).unwrap());
        assert_eq!(zeros_of(&a).len(), 37);
        assert!(zeros_of(&random_unstructured_mask(&w, 0.0, 4).unwrap()).is_empty());
    }

    #[test]
    fn counts_follow_decimal_amounts() {
        assert_eq!(unstructured_count(0.29, 100), 29);
        assert_eq!(unstructured_count(0.3, 7), 2);
        assert_eq!(structured_count(0.5, 3), 2);
        assert_eq!(structured_count(0.3, 16), 5);
    }

    #[test]
    fn ln_structured_zeroes_smallest_channel() {
        // channel norms (1.0, 3.0)
        let w = Tensor::new([2, 1, 1, 2], vec![0.6f32, 0.8, 3.0, 0.0]).unwrap();
        let m = ln_structured_mask(&w, 0.5, 2.0).unwrap();
        assert_eq!(m.data(), &[0, 0, 1, 1]);
        assert!(zeros_of(&ln_structured_mask(&w, 0.0, 2.0).unwrap()).is_empty());
        assert!(ln_structured_mask(&Tensor::new([2], vec![1.0f32, 2.0]).unwrap(), 0.5, 2.0).is_err());
    }

    #[test]
    fn structured_masks_remove_whole_channels() {
        let w = Tensor::new([6, 2, 3, 3], (0..108).map(|i| (i as f32 * 0.7).sin()).collect()).unwrap();
        for m in [
            random_structured_mask(&w, 0.5, 1).unwrap(),
            ln_structured_mask(&w, 0.5, 1.0).unwrap(),
        ] {
            let rows: Vec<&[u8]> = m.data().chunks(18).collect();
            assert_eq!(rows.iter().filter(|r| r.iter().all(|&v| v == 0)).count(), 3);
            assert!(rows.iter().all(|r| r.iter().all(|&v| v == 0) || r.iter().all(|&v| v == 1)));
        }
    }

    #[test]
    fn apply_is_idempotent_and_checks_shapes() {
        let mut c = Checkpoint::new();
        c.push("conv.weight", EntryValue::Float(Tensor::new([2, 1, 1, 2], vec![0.5f32, -1.0, 2.0, 0.25]).unwrap().into()))
            .unwrap();
        c.push("conv.bias", EntryValue::Float(Tensor::new([2], vec![0.1f32, 0.2]).unwrap().into()))
            .unwrap();
        let spec = PruneSpec::new(PruneMethod::L1Unstructured, 0.5);
        let mask = generate_mask(&c, &spec).unwrap();
        assert_eq!(mask.masks.len(), 1);
        let once = apply_mask(&c, &mask).unwrap();
        assert_eq!(apply_mask(&once, &mask).unwrap(), once);
        assert_eq!(once.dense_f32("conv.weight").unwrap().data(), &[0.5, -1.0, 2.0, 0.0][..].iter().map(|&v| if v == 0.5 { 0.0 } else { v }).collect::<Vec<_>>()[..]);
        assert_eq!(once.get("conv.bias"), c.get("conv.bias"));
        assert!((sparsity(&once).unwrap() - 2.0 / 6.0).abs() < 1e-12);

        let bad = PruneMask {
            masks: vec![("conv.weight".into(), Tensor::full([4], 1u8))],
        };
        assert!(apply_mask(&c, &bad).is_err());
        let unknown = PruneMask {
            masks: vec![("nope".into(), Tensor::full([4], 1u8))],
        };
        assert!(apply_mask(&c, &unknown).is_err());
    }

    #[test]
    fn size_multiplier() {
        assert_eq!(pruned_size_mb(10.0, 0.0), 10.0);
        assert!((pruned_size_mb(13.38, 0.3) - 9.366).abs() < 1e-12);
    }

    #[test]
    fn sparse_encoding_shrinks_pruned_tensors() {
        let mut c = Checkpoint::new();
        let mut data = vec![0f32; 100];
        data[3] = 1.0;
        data[50] = -2.0;
        c.push("w", EntryValue::Float(Tensor::new([10, 10], data).unwrap().into())).unwrap();
        let s = sparsify(&c, &LayerFilter::all()).unwrap();
        assert_eq!(s.storage_bytes(), 8 + 2 * 8);
        assert_eq!(s.dense_f32("w").unwrap(), c.dense_f32("w").unwrap());
        assert!(SparseTensor::new(vec![4], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseTensor::new(vec![4], vec![4], vec![1.0]).is_err());
    }
}
