use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TinySegNet;
use crate::data::{augment, AugmentConfig};
use crate::data::{class_names, class_pixel_counts, SceneSample};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::metrics::{argmax_channels, ConfusionMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied every `step_lr` epochs.
    pub lr_decay: Option<f64>,
    pub step_lr: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Count class 0 in the validation mIoU.
    pub include_background: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_decay: None,
            step_lr: None,
            epochs: 30,
            batch_size: 8,
            optimizer: Optimizer::default(),
            seed: 0,
            augment: AugmentConfig::identity(),
            include_background: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr {} must be finite and > 0", self.lr)));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::invalid(format!("lr_decay {d} outside (0, 1]")));
            }
            if self.step_lr.is_none() {
                return Err(Error::invalid("lr_decay is set but step_lr is not"));
            }
        }
        if self.step_lr == Some(0) {
            return Err(Error::invalid("step_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        match self.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
                }
            }
            Optimizer::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
                }
            }
        }
        self.augment.validate()
    }
}

/// `lr * decay^floor(epoch / step)` when both are set, `lr` otherwise.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    match (cfg.lr_decay, cfg.step_lr) {
        (Some(decay), Some(step)) if step > 0 => cfg.lr * decay.powi((epoch / step) as i32),
        _ => cfg.lr,
    }
}

/// Validation metrics after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
}

fn batch_tensors(samples: &[&SceneSample]) -> Result<(Tensor<f32>, Tensor<i64>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<&Tensor<i64>> = samples.iter().map(|s| &s.labels).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&labels)?))
}

/// Pooled confusion matrix of `net` over `samples`.
pub fn evaluate(net: &TinySegNet<f32>, samples: &[SceneSample], batch_size: usize) -> Result<ConfusionMatrix> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut cm = ConfusionMatrix::new(net.classes());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs)?;
        let pred = argmax_channels(&net.forward(&x)?)?;
        cm.update(y.data(), pred.data())?;
    }
    Ok(cm)
}

enum OptState {
    Adam { m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, t: i32 },
    Sgd { velocity: Vec<Vec<f32>> },
}

impl OptState {
    fn new(opt: Optimizer, net: &TinySegNet<f32>) -> Self {
        let zeros = || net.parameters().iter().map(|p| vec![0f32; p.len()]).collect();
        match opt {
            Optimizer::Adam { .. } => OptState::Adam { m: zeros(), v: zeros(), t: 0 },
            Optimizer::Sgd { .. } => OptState::Sgd { velocity: zeros() },
        }
    }

    fn step(&mut self, opt: Optimizer, lr: f64, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>]) {
        match (self, opt) {
            (OptState::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                let step = (lr * c2.sqrt() / c1) as f32;
                let eps_hat = (eps * c2.sqrt()) as f32;
                for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(m.iter_mut().zip(v.iter_mut())) {
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= step * *m / (v.sqrt() + eps_hat);
                    }
                }
            }
            (OptState::Sgd { velocity }, Optimizer::Sgd { momentum }) => {
                let (mu, lr) = (momentum as f32, lr as f32);
                for ((p, g), vel) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
                    for ((w, &g), u) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *u = mu * *u + g;
                        *w -= lr * *u;
                    }
                }
            }
            _ => unreachable!("optimizer state built from the same config"),
        }
    }
}

/// Trains `net` in place and returns one validation record per epoch.
///
/// Deterministic for a given `cfg.seed`: the shuffle order and augmentation
/// draws come from separate seeded streams.
pub fn train(
    net: &mut TinySegNet<f32>,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    cfg: &TrainConfig,
    loss: &LossSpec,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    loss.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut loss = loss.clone();
    loss.resolve_weights(&class_pixel_counts(train_set, net.classes())?)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut state = OptState::new(cfg.optimizer, net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let augmented = idx
                .iter()
                .map(|&i| augment(&train_set[i], &cfg.augment, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SceneSample> = augmented.iter().collect();
            let (x, y) = batch_tensors(&refs)?;
            let cache = net.forward_cached(&x)?;
            let out = loss.evaluate(&cache.logits, &y)?;
            if !out.value.is_finite() || !out.grad.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let grads = net.backward(&cache, &out.grad)?;
            state.step(cfg.optimizer, lr, net.parameters_mut(), &grads.tensors);
            loss_sum += out.value as f64;
            batches += 1;
        }
        let cm = evaluate(net, val_set, cfg.batch_size)?;
        trace.push(EpochRecord {
            epoch,
            per_class_iou: cm.iou_per_class(),
            miou: cm.miou(cfg.include_background)?,
            lr,
            train_loss: loss_sum / batches as f64,
        });
    }
    Ok(trace)
}

/// CSV with columns `epoch, iou_<class>..., miou, lr, train_loss`; an empty
/// IoU cell marks a class with an empty union.
pub fn write_trace_csv(trace: &[EpochRecord], classes: usize) -> String {
    let mut s = String::from("epoch");
    for name in class_names(classes) {
        let _ = write!(s, ",iou_{}", name.to_lowercase());
    }
    s.push_str(",miou,lr,train_loss\n");
    for r in trace {
        let _ = write!(s, "{}", r.epoch);
        for iou in &r.per_class_iou {
            match iou {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        let _ = writeln!(s, ",{:.6},{:e},{:.6}", r.miou, r.lr, r.train_loss);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(decay: Option<f64>, step: Option<usize>) -> TrainConfig {
        TrainConfig {
            lr_decay: decay,
            step_lr: step,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(lr_at_epoch(&cfg(None, None), 99), 5e-4);
        assert_eq!(lr_at_epoch(&cfg(Some(0.995), Some(25)), 0), 5e-4);
        assert_eq!(lr_at_epoch(&cfg(Some(0.995), Some(25)), 24), 5e-4);
        let at100 = lr_at_epoch(&cfg(Some(0.995), Some(25)), 100);
        assert!((at100 - 5e-4 * 0.995f64.powi(4)).abs() < 1e-18);
        // 4.90075e-4 exactly; the quoted 4.9005e-4 agrees to 1e-4 relative
        assert!((at100 / 4.9005e-4 - 1.0).abs() < 1e-4);
        assert!(cfg(Some(0.995), None).validate().is_err());
        assert!(cfg(None, Some(0)).validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut net = TinySegNet::<f32>::new(4, 5, 0).unwrap();
        let before = net.clone();
        let c = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let trace = train(&mut net, &[], &[], &c, &LossSpec::new(crate::losses::LossKind::CrossEntropy)).unwrap();
        assert!(trace.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn csv_layout() {
        let r = EpochRecord {
            epoch: 0,
            per_class_iou: vec![Some(0.5), None],
            miou: 0.5,
            lr: 5e-4,
            train_loss: 0.25,
        };
        assert_eq!(
            write_trace_csv(&[r], 2),
            "epoch,iou_background,iou_object,miou,lr,train_loss\n0,0.500000,,0.500000,5e-4,0.250000\n"
        );
    }
}
