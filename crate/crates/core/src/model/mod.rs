//! A small encoder-decoder segmentation network with a hand-written backward
//! pass, plus parameter, byte and FLOP accounting.
//!
//! Layout, for `F` base features and `K` classes:
//!
//! ```text
//! enc1  conv3x3       3  -> F    + ReLU
//! down  conv3x3 /2    F  -> 2F   + ReLU
//! mid   conv3x3       2F -> 2F   + ReLU
//!       nearest upsample x2
//! head  conv1x1       2F -> K
//! ```

mod train;

pub use train::{evaluate, lr_at_epoch, train, write_trace_csv, EpochRecord, Optimizer, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Checkpoint, EntryValue};
use crate::error::{Error, Result};
use crate::tensor::ops::{conv2d_backward, conv2d_forward, relu, relu_backward, upsample_nearest, upsample_nearest_backward};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_FEATURES: usize = 16;

/// Parameter names in checkpoint order.
pub const PARAM_NAMES: [&str; 8] = [
    "enc1.weight",
    "enc1.bias",
    "down.weight",
    "down.bias",
    "mid.weight",
    "mid.bias",
    "head.weight",
    "head.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv<T> {
    fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: Tensor::zeros([cout, cin, kernel, kernel]),
            bias: Tensor::zeros([cout]),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinySegNet<T> {
    pub enc1: Conv<T>,
    pub down: Conv<T>,
    pub mid: Conv<T>,
    pub head: Conv<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    enc1: Tensor<T>,
    down: Tensor<T>,
    mid: Tensor<T>,
    up: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Parameter gradients in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> TinySegNet<T> {
    /// All-zero network.
    pub fn zeros(features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes < 2 {
            return Err(Error::invalid(format!(
                "need features >= 1 and classes >= 2, got {features} and {classes}"
            )));
        }
        Ok(Self {
            enc1: Conv::zeros(3, features, 3, 1),
            down: Conv::zeros(features, 2 * features, 3, 2),
            mid: Conv::zeros(2 * features, 2 * features, 3, 1),
            head: Conv::zeros(2 * features, classes, 1, 1),
        })
    }

    /// He-normal weights (`sd = sqrt(2 / fan_in)`), zero biases.
    pub fn new(features: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(features, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in net.layers_mut() {
            let fan_in: usize = conv.weight.shape()[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
            for v in conv.weight.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    pub fn features(&self) -> usize {
        self.enc1.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.head.weight.shape()[0]
    }

    pub fn layers(&self) -> [&Conv<T>; 4] {
        [&self.enc1, &self.down, &self.mid, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut Conv<T>; 4] {
        [&mut self.enc1, &mut self.down, &mut self.mid, &mut self.head]
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers().into_iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            &[_, 3, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(()),
            s => Err(Error::shape(format!("input must be [N,3,H,W] with even H and W, got {s:?}"))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.logits)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let enc1 = relu(&self.enc1.forward(x)?);
        let down = relu(&self.down.forward(&enc1)?);
        let mid = relu(&self.mid.forward(&down)?);
        let up = upsample_nearest(&mid, 2)?;
        let logits = self.head.forward(&up)?;
        Ok(ForwardCache {
            input: x.clone(),
            enc1,
            down,
            mid,
            up,
            logits,
        })
    }

    /// Parameter gradients given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if grad_logits.shape() != cache.logits.shape() {
            return Err(Error::shape(format!(
                "logit gradient {:?}, expected {:?}",
                grad_logits.shape(),
                cache.logits.shape()
            )));
        }
        let head = conv2d_backward(&cache.up, &self.head.weight, grad_logits, 1, 0)?;
        let g_mid = relu_backward(&cache.mid, &upsample_nearest_backward(&head.x, 2)?)?;
        let mid = conv2d_backward(&cache.down, &self.mid.weight, &g_mid, 1, 1)?;
        let g_down = relu_backward(&cache.down, &mid.x)?;
        let down = conv2d_backward(&cache.enc1, &self.down.weight, &g_down, 2, 1)?;
        let g_enc1 = relu_backward(&cache.enc1, &down.x)?;
        let enc1 = conv2d_backward(&cache.input, &self.enc1.weight, &g_enc1, 1, 1)?;
        Ok(Gradients {
            tensors: vec![enc1.w, enc1.b, down.w, down.b, mid.w, mid.b, head.w, head.b],
        })
    }

    pub fn cast<U: Real>(&self) -> TinySegNet<U> {
        let conv = |c: &Conv<T>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
            pad: c.pad,
        };
        TinySegNet {
            enc1: conv(&self.enc1),
            down: conv(&self.down),
            mid: conv(&self.mid),
            head: conv(&self.head),
        }
    }

    /// f32 checkpoint with entries in [`PARAM_NAMES`] order.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, t) in PARAM_NAMES.iter().zip(self.parameters()) {
            ckpt.push(*name, EntryValue::Float(t.cast::<f32>().into()))
                .expect("parameter names are unique");
        }
        ckpt
    }

    /// Multiply-adds of one forward pass at `h x w`, counted as 2 FLOPs each.
    pub fn estimate_flops(&self, h: usize, w: usize) -> Result<u64> {
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
            return Err(Error::shape(format!("input extent {h}x{w} must be even and non-zero")));
        }
        let extents = [(h, w), (h / 2, w / 2), (h / 2, w / 2), (h, w)];
        Ok(self
            .layers()
            .iter()
            .zip(extents)
            .map(|(c, (oh, ow))| {
                let s = c.weight.shape();
                2 * (c.kernel() * c.kernel() * s[1] * s[0] * oh * ow) as u64
            })
            .sum())
    }
}

impl TinySegNet<f32> {
    /// Rebuilds a network from a checkpoint, dequantizing or densifying
    /// entries as needed.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let enc1 = ckpt.dense_f32("enc1.weight")?;
        let head = ckpt.dense_f32("head.weight")?;
        let mut net = Self::zeros(enc1.shape()[0], head.shape()[0])?;
        for (name, slot) in PARAM_NAMES.iter().zip(net.parameters_mut()) {
            let t = ckpt.dense_f32(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(format!(
                    "entry `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(net)
    }
}

/// Total number of parameters in a checkpoint.
pub fn count_params(ckpt: &Checkpoint) -> usize {
    ckpt.count_params()
}

/// Stored size in MB (10^6 bytes).
pub fn model_size_mb(ckpt: &Checkpoint) -> f64 {
    ckpt.size_mb()
}

/// Size of `n` f32 parameters in MB.
pub fn size_mb_for_params(n: u64) -> f64 {
    n as f64 * 4.0 / 1e6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_counts() {
        let net = TinySegNet::<f32>::new(16, 5, 0).unwrap();
        let x = Tensor::<f32>::full([2, 3, 8, 6], 0.5);
        assert_eq!(net.forward(&x).unwrap().shape(), &[2, 5, 8, 6]);
        let expected = (16 * 27 + 16) + (32 * 144 + 32) + (32 * 288 + 32) + (5 * 32 + 5);
        assert_eq!(net.param_count(), expected);
        assert_eq!(count_params(&net.to_checkpoint()), expected);
        assert_eq!(model_size_mb(&net.to_checkpoint()), expected as f64 * 4.0 / 1e6);
        assert!(net.forward(&Tensor::full([1, 3, 7, 8], 0.0)).is_err());
        assert!(net.forward(&Tensor::full([1, 1, 8, 8], 0.0)).is_err());
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let mut net = TinySegNet::<f64>::zeros(4, 3).unwrap();
        net.head.bias = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::<f64>::full([1, 3, 4, 4], 0.7);
        let out = net.forward(&x).unwrap();
        for c in 0..3 {
            assert!(out.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == net.head.bias.data()[c]));
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let net = TinySegNet::<f64>::new(4, 3, 1).unwrap();
        let cache = net.forward_cached(&Tensor::full([1, 3, 4, 4], 0.3)).unwrap();
        let g = net.backward(&cache, &Tensor::zeros([1, 3, 4, 4])).unwrap();
        assert!(g.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(net.backward(&cache, &Tensor::zeros([1, 3, 2, 2])).is_err());
    }

    #[test]
    fn he_init_is_seeded() {
        let a = TinySegNet::<f32>::new(8, 5, 3).unwrap();
        assert_eq!(a, TinySegNet::new(8, 5, 3).unwrap());
        assert_ne!(a, TinySegNet::new(8, 5, 4).unwrap());
        assert!(a.parameters().iter().skip(1).step_by(2).all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = TinySegNet::<f32>::new(4, 2, 9).unwrap();
        let back = TinySegNet::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn flops_by_hand() {
        let net = TinySegNet::<f32>::zeros(1, 2).unwrap();
        // enc1 2*9*3*1*16, down 2*9*1*2*4, mid 2*9*2*2*4, head 2*1*2*2*16
        assert_eq!(net.estimate_flops(4, 4).unwrap(), 864 + 144 + 288 + 128);
    }

    #[test]
    fn table_sizes() {
        assert_eq!(format!("{:.2}", size_mb_for_params(363_132)), "1.45");
        assert_eq!(format!("{:.2}", size_mb_for_params(1_363_168)), "5.45");
        assert_eq!(format!("{:.2}", size_mb_for_params(47_489_184)), "189.96");
    }
}
