//! Training-time augmentations.
//!
//! Geometric transforms (scale, crop, flips) move image and labels together:
//! bilinear resampling for the image, nearest-neighbour for labels. Colour
//! jitter only touches the image.

use rand::Rng;

use super::{hsv_to_rgb, rgb_to_hsv, SceneSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_colorjitter: f64,
    /// Multiplicative amplitude: factor drawn from `[1 - a, 1 + a]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift drawn from `[-hue, hue]` (fraction of the hue circle).
    pub hue: f64,
    /// Isotropic rescale factor range.
    pub scale: (f64, f64),
    /// Square crop taken after scaling; `None` keeps the scaled image.
    pub crop: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_colorjitter: 0.25,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            scale: (1.0, 1.0),
            crop: None,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves every sample untouched.
    pub fn identity() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_colorjitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_colorjitter", self.p_colorjitter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, a) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::invalid(format!("{name} amplitude {a} outside [0, 1)")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::invalid(format!("hue amplitude {} outside [0, 0.5]", self.hue)));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("scale range must satisfy 0 < lo <= hi"));
        }
        if self.crop == Some(0) {
            return Err(Error::invalid("crop size must be positive"));
        }
        Ok(())
    }
}

fn factor(amplitude: f64, rng: &mut impl Rng) -> f64 {
    1.0 + amplitude * (2.0 * rng.random::<f64>() - 1.0)
}

/// Applies a random augmentation drawn from `rng`.
pub fn augment(sample: &SceneSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let mut img = sample.image.data().to_vec();
    let mut lbl = sample.labels.data().to_vec();
    let (mut h, mut w) = (h, w);

    let s = if cfg.scale.0 == cfg.scale.1 {
        cfg.scale.0
    } else {
        rng.random_range(cfg.scale.0..=cfg.scale.1)
    };
    if s != 1.0 {
        let nh = ((h as f64 * s).round() as usize).max(1);
        let nw = ((w as f64 * s).round() as usize).max(1);
        (img, lbl) = rescale(&img, &lbl, h, w, nh, nw);
        (h, w) = (nh, nw);
    }

    if let Some(c) = cfg.crop {
        if c > h || c > w {
            return Err(Error::invalid(format!("crop {c} larger than image {h}x{w}")));
        }
        let oy = rng.random_range(0..=h - c);
        let ox = rng.random_range(0..=w - c);
        let mut ci = Vec::with_capacity(3 * c * c);
        for ch in 0..3 {
            for y in 0..c {
                let row = ch * h * w + (oy + y) * w + ox;
                ci.extend_from_slice(&img[row..row + c]);
            }
        }
        let mut cl = Vec::with_capacity(c * c);
        for y in 0..c {
            cl.extend_from_slice(&lbl[(oy + y) * w + ox..(oy + y) * w + ox + c]);
        }
        (img, lbl, h, w) = (ci, cl, c, c);
    }

    if rng.random_bool(cfg.p_hflip) {
        for row in img.chunks_exact_mut(w) {
            row.reverse();
        }
        for row in lbl.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if rng.random_bool(cfg.p_vflip) {
        for plane in img.chunks_exact_mut(h * w) {
            flip_rows(plane, h, w);
        }
        flip_rows(&mut lbl, h, w);
    }

    if rng.random_bool(cfg.p_colorjitter) {
        let b = factor(cfg.brightness, rng);
        let c = factor(cfg.contrast, rng);
        let sat = factor(cfg.saturation, rng);
        let hue = cfg.hue * (2.0 * rng.random::<f64>() - 1.0);
        color_jitter(&mut img, h * w, b, c, sat, hue);
    }

    SceneSample::new(Tensor::new([3, h, w], img)?, Tensor::new([h, w], lbl)?)
}

fn flip_rows<T>(plane: &mut [T], h: usize, w: usize) {
    for y in 0..h / 2 {
        let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
        top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
    }
}

fn rescale(img: &[f32], lbl: &[i64], h: usize, w: usize, nh: usize, nw: usize) -> (Vec<f32>, Vec<i64>) {
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = vec![0f32; 3 * nh * nw];
    let mut labels = vec![0i64; nh * nw];
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        let ny = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..3 {
                let p = &img[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] as f64 * (1.0 - tx) + p[y0 * w + x1] as f64 * tx;
                let bot = p[y1 * w + x0] as f64 * (1.0 - tx) + p[y1 * w + x1] as f64 * tx;
                out[ch * nh * nw + y * nw + x] = (top * (1.0 - ty) + bot * ty) as f32;
            }
            let nx = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
            labels[y * nw + x] = lbl[ny * w + nx];
        }
    }
    (out, labels)
}

/// Brightness, contrast and saturation are multiplicative; hue is a rotation
/// on the hue circle. A factor of exactly 1 (or a zero shift) is skipped so
/// that zero amplitudes leave the image bit-identical.
fn color_jitter(img: &mut [f32], plane: usize, brightness: f64, contrast: f64, saturation: f64, hue: f64) {
    let clamp = |v: f64| v.clamp(0.0, 1.0) as f32;
    if brightness != 1.0 {
        img.iter_mut().for_each(|v| *v = clamp(*v as f64 * brightness));
    }
    let gray = |img: &[f32], i: usize| {
        0.299 * img[i] as f64 + 0.587 * img[plane + i] as f64 + 0.114 * img[2 * plane + i] as f64
    };
    if contrast != 1.0 {
        let mean = (0..plane).map(|i| gray(img, i)).sum::<f64>() / plane as f64;
        img.iter_mut()
            .for_each(|v| *v = clamp((*v as f64 - mean) * contrast + mean));
    }
    if saturation != 1.0 {
        for i in 0..plane {
            let g = gray(img, i);
            for ch in 0..3 {
                let v = &mut img[ch * plane + i];
                *v = clamp(g + (*v as f64 - g) * saturation);
            }
        }
    }
    if hue != 0.0 {
        for i in 0..plane {
            let rgb = [img[i] as f64, img[plane + i] as f64, img[2 * plane + i] as f64];
            let (h, s, v) = rgb_to_hsv(rgb);
            let out = hsv_to_rgb(h + hue, s, v);
            for ch in 0..3 {
                img[ch * plane + i] = clamp(out[ch]);
            }
        }
    }
}
