//! Numeric kernels: 2-D convolution, ReLU, nearest upsampling and channel softmax.
//!
//! All reductions use a fixed loop nest so results are identical run to run.
//! Convolution lowers each sample to an im2col matrix and multiplies it by the
//! flattened kernel; batch gradients are accumulated in sample order.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output spatial extent for a convolution (floor mode).
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (&[n, cin, h, wd], &[cout, wcin, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(Error::shape(format!(
                "conv2d expects x [N,C,H,W] and w [O,C,kh,kw], got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh: conv_out_extent(h, kh, stride, pad)?,
            ow: conv_out_extent(wd, kw, stride, pad)?,
            stride,
            pad,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn in_plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&v| v < extent)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let pix = self.pixels();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let row = &mut col[r * pix..(r + 1) * pix];
                    for oy in 0..self.oh {
                        let out = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ki, self.h) {
                            None => out.fill(T::zero()),
                            Some(iy) => {
                                let line = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, o) in out.iter_mut().enumerate() {
                                    *o = match self.src(ox, kj, self.w) {
                                        Some(ix) => line[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], gx: &mut [T]) {
        let pix = self.pixels();
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let row = &col[r * pix..(r + 1) * pix];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ki, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                plane[iy * self.w + ix] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight fixed accumulator lanes, combined in a fixed order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}

/// 2-D cross-correlation: `x [N,Cin,H,W] * w [Cout,Cin,kh,kw] + b [Cout]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if b.shape() != [g.cout] {
        return Err(Error::shape(format!(
            "conv2d: bias {:?}, expected [{}]",
            b.shape(),
            g.cout
        )));
    }
    let (rows, pix) = (g.rows(), g.pixels());
    let mut col = vec![T::zero(); rows * pix];
    let mut out = vec![T::zero(); g.n * g.cout * pix];
    for s in 0..g.n {
        g.im2col(&x.data()[s * g.in_plane()..(s + 1) * g.in_plane()], &mut col);
        let out_s = &mut out[s * g.cout * pix..(s + 1) * g.cout * pix];
        for co in 0..g.cout {
            let orow = &mut out_s[co * pix..(co + 1) * pix];
            orow.fill(b.data()[co]);
            let wrow = &w.data()[co * rows..(co + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                axpy(wv, &col[r * pix..(r + 1) * pix], orow);
            }
        }
    }
    Tensor::new([g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of `sum(grad_out * conv2d_forward(x, w, b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d_backward: grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let (rows, pix) = (g.rows(), g.pixels());
    let mut col = vec![T::zero(); rows * pix];
    let mut gcol = vec![T::zero(); rows * pix];
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.cout];

    for s in 0..g.n {
        g.im2col(&x.data()[s * g.in_plane()..(s + 1) * g.in_plane()], &mut col);
        let go = &grad_out.data()[s * g.cout * pix..(s + 1) * g.cout * pix];

        for co in 0..g.cout {
            let grow = &go[co * pix..(co + 1) * pix];
            gb[co] += grow.iter().copied().sum::<T>();
            let gwrow = &mut gw[co * rows..(co + 1) * rows];
            for (r, acc) in gwrow.iter_mut().enumerate() {
                *acc += dot(grow, &col[r * pix..(r + 1) * pix]);
            }
        }

        gcol.fill(T::zero());
        for r in 0..rows {
            let crow = &mut gcol[r * pix..(r + 1) * pix];
            for co in 0..g.cout {
                axpy(w.data()[co * rows + r], &go[co * pix..(co + 1) * pix], crow);
            }
        }
        g.col2im(&gcol, &mut gx[s * g.in_plane()..(s + 1) * g.in_plane()]);
    }

    Ok(Conv2dGrads {
        x: Tensor::new(x.shape(), gx)?,
        w: Tensor::new(w.shape(), gw)?,
        b: Tensor::new([g.cout], gb)?,
    })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of ReLU given the forward *output*.
pub fn relu_backward<T: Real>(out: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if out.shape() != grad.shape() {
        return Err(Error::shape("relu_backward: shape mismatch"));
    }
    let data = out
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(out.shape(), data)
}

fn nchw<T: Real>(x: &Tensor<T>, op: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(format!("{op}: expected [N,C,H,W], got {:?}", x.shape()))),
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(x, "upsample_nearest")?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            let line = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            out.extend((0..ow).map(|ox| line[ox / factor]));
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

/// Scatter-add of the upsampled gradient back onto the source grid.
pub fn upsample_nearest_backward<T: Real>(grad: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = nchw(grad, "upsample_nearest_backward")?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::shape(format!(
            "gradient {oh}x{ow} not divisible by factor {factor}"
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); n * c * h * w];
    for (plane, dst) in grad.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += plane[oy * ow + ox];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Softmax over the channel axis of `[N,K,H,W]` logits, per pixel.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = nchw(x, "softmax_channels")?;
    if k < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {k}")));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let base = s * k * hw;
        for p in 0..hw {
            let at = |c: usize| base + c * hw + p;
            let m = (0..k).map(|c| x.data()[at(c)]).fold(x.data()[at(0)], T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (x.data()[at(c)] - m).exp();
                out[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                out[at(c)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Vector-Jacobian product of the channel softmax: given `probs = softmax(z)`
/// and `grad_probs = dL/dprobs`, returns `dL/dz`.
pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = nchw(probs, "softmax_channels_backward")?;
    if grad_probs.shape() != probs.shape() {
        return Err(Error::shape("softmax_channels_backward: shape mismatch"));
    }
    let hw = h * w;
    let (p, g) = (probs.data(), grad_probs.data());
    let mut out = vec![T::zero(); probs.len()];
    for s in 0..n {
        let base = s * k * hw;
        for px in 0..hw {
            let mut inner = T::zero();
            for c in 0..k {
                let i = base + c * hw + px;
                inner += p[i] * g[i];
            }
            for c in 0..k {
                let i = base + c * hw + px;
                out[i] = p[i] * (g[i] - inner);
            }
        }
    }
    Tensor::new(probs.shape(), out)
}
