//! Synthetic waste scenes: objects of four material families composited onto
//! colourful backgrounds, with a per-pixel label map.
//!
//! Generation is a pure function of `(seed, index)`: each scene draws from its
//! own ChaCha stream, so scenes can be produced in any order.

mod augment;
mod pnm;

pub use augment::{augment, AugmentConfig};
pub use pnm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_dataset, load_sample, read_manifest, save_sample,
    write_dataset,
};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Material class names in label order (label 0 is background).
pub const MATERIALS: [&str; 4] = ["Aluminium", "Paper", "Bottle", "Nylon"];

/// Number of classes in multi-class mode (background + materials).
pub const MULTICLASS: usize = 5;
/// Number of classes in binary (object vs background) mode.
pub const BINARY: usize = 2;

/// Display names for label indices: background first, then the materials
/// (or a single "Object" class in binary mode).
pub fn class_names(classes: usize) -> Vec<String> {
    match classes {
        MULTICLASS => std::iter::once("Background").chain(MATERIALS).map(String::from).collect(),
        BINARY => vec!["Background".into(), "Object".into()],
        k => (0..k).map(|c| format!("class{c}")).collect(),
    }
}

/// One image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[H, W]`, values in `0..classes`.
    pub labels: Tensor<i64>,
}

impl SceneSample {
    pub fn new(image: Tensor<f32>, labels: Tensor<i64>) -> Result<Self> {
        match (image.shape(), labels.shape()) {
            (&[3, h, w], &[lh, lw]) if h == lh && w == lw => Ok(Self { image, labels }),
            (a, b) => Err(Error::shape(format!("image {a:?} does not match labels {b:?}"))),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[1]
    }
}

/// Parameters of the scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Image height and width in pixels.
    pub size: usize,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// 2 for binary mode, 5 for per-material labels.
    pub classes: usize,
    /// Relative frequency with which each material is drawn.
    pub class_weights: [f64; 4],
    /// Object radius range as a fraction of the image size.
    pub object_scale: (f64, f64),
    /// Amplitude of uniform per-pixel noise.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            objects: (2, 5),
            classes: MULTICLASS,
            class_weights: [0.4, 0.25, 0.2, 0.15],
            object_scale: (0.08, 0.15),
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::invalid(format!("image size {} < 16", self.size)));
        }
        if self.objects.0 > self.objects.1 {
            return Err(Error::invalid("objects range is empty"));
        }
        if self.classes != BINARY && self.classes != MULTICLASS {
            return Err(Error::invalid(format!("classes must be 2 or 5, got {}", self.classes)));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("class weights must be positive"));
        }
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("object scale range must satisfy 0 < lo <= hi < 1"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 0.5]"));
        }
        Ok(())
    }

    /// Label written for material `m` (0-based).
    fn label_of(&self, m: usize) -> i64 {
        if self.classes == BINARY {
            1
        } else {
            m as i64 + 1
        }
    }
}

/// Colour family of a material: HSV centre and per-object jitter.
struct Family {
    hue: f64,
    sat: f64,
    val: f64,
}

const FAMILIES: [Family; 4] = [
    // Aluminium: bright, almost grey
    Family { hue: 0.60, sat: 0.06, val: 0.88 },
    // Paper: cream
    Family { hue: 0.11, sat: 0.35, val: 0.95 },
    // Bottle: cyan
    Family { hue: 0.50, sat: 0.80, val: 0.85 },
    // Nylon: magenta
    Family { hue: 0.88, sat: 0.70, val: 0.90 },
];

/// Point-in-shape test in the object's unit frame.
fn inside(material: usize, u: f64, v: f64) -> bool {
    match material {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.9 && v.abs() <= 0.7,
        2 => (u / 1.35).powi(2) + (v / 0.45).powi(2) <= 1.0,
        _ => {
            let rho = (u * u + v * v).sqrt();
            rho <= 0.75 + 0.25 * (3.0 * v.atan2(u)).cos()
        }
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn pick_material(weights: &[f64; 4], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

/// Renders scene `index` of the corpus described by `cfg`.
pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.size;
    let plane = n * n;
    let mut image = vec![0f32; 3 * plane];
    let mut labels = vec![0i64; plane];

    // Background: two dark saturated colours blended along a random direction,
    // modulated by a soft stripe texture.
    let c0 = hsv_to_rgb(rng.random(), rng.random_range(0.3..0.7), rng.random_range(0.15..0.4));
    let c1 = hsv_to_rgb(rng.random(), rng.random_range(0.3..0.7), rng.random_range(0.15..0.4));
    let dir = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (dir.cos(), dir.sin());
    let freq = rng.random_range(2.0..6.0) * 2.0 * PI / n as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let t = (0.5 + (fx - 0.5) * dx + (fy - 0.5) * dy).clamp(0.0, 1.0);
            let stripe = 1.0 + 0.1 * ((x as f64 * dy - y as f64 * dx) * freq + phase).sin();
            for ch in 0..3 {
                image[ch * plane + y * n + x] = ((c0[ch] * (1.0 - t) + c1[ch] * t) * stripe) as f32;
            }
        }
    }

    let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
    for _ in 0..count {
        let material = pick_material(&cfg.class_weights, &mut rng);
        let fam = &FAMILIES[material];
        let radius = n as f64 * rng.random_range(cfg.object_scale.0..=cfg.object_scale.1);
        let cx = rng.random_range(0.1..0.9) * n as f64;
        let cy = rng.random_range(0.1..0.9) * n as f64;
        let theta = rng.random_range(0.0..2.0 * PI);
        let (sin, cos) = theta.sin_cos();
        let base = hsv_to_rgb(
            fam.hue + rng.random_range(-0.02..0.02),
            (fam.sat + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
            (fam.val + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
        );
        let label = cfg.label_of(material);

        let reach = radius * 1.5;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(n);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // inverse of rotate-then-scale
                let u = (cos * px + sin * py) / radius;
                let v = (-sin * px + cos * py) / radius;
                if !inside(material, u, v) {
                    continue;
                }
                let shade = 0.9 + 0.1 * v.clamp(-1.0, 1.0);
                labels[y * n + x] = label;
                for ch in 0..3 {
                    image[ch * plane + y * n + x] = (base[ch] * shade) as f32;
                }
            }
        }
    }

    if cfg.noise > 0.0 {
        for v in image.iter_mut() {
            *v = (*v + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
        }
    } else {
        image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    SceneSample::new(Tensor::new([3, n, n], image)?, Tensor::new([n, n], labels)?)
}

/// Scenes `0..count` of the corpus.
pub fn generate_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<SceneSample>> {
    (0..count as u64).map(|i| generate_scene(cfg, i)).collect()
}

/// Splits off the first `floor(train_fraction * len)` samples for training.
pub fn split(samples: Vec<SceneSample>, train_fraction: f64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid(format!("split fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (train_fraction * samples.len() as f64 + 1e-9).floor() as usize;
    let mut train = samples;
    let val = train.split_off(n_train.min(train.len()));
    Ok((train, val))
}

/// Exact per-class pixel histogram over a dataset.
pub fn class_pixel_counts(samples: &[SceneSample], classes: usize) -> Result<Vec<u64>> {
    if samples.is_empty() {
        return Err(Error::invalid("class_pixel_counts on an empty dataset"));
    }
    let mut counts = vec![0u64; classes];
    for s in samples {
        for &l in s.labels.data() {
            let slot = usize::try_from(l)
                .ok()
                .and_then(|i| counts.get_mut(i))
                .ok_or(Error::LabelOutOfRange { label: l, classes })?;
            *slot += 1;
        }
    }
    Ok(counts)
}
