//! Differentiable building blocks with hand-written backward passes.
//!
//! Every layer exposes a `forward` that returns whatever the matching
//! `backward` needs, and a `backward` that accumulates parameter gradients into
//! a same-shaped gradient container and returns the gradient of its input.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

#[allow(unused_imports)]
use num_traits::Float;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{axpy, dot, Grid, Mat};

/// Exact-erf GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with a learned scale and shift per channel.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self { gamma: vec![1.0; width], beta: vec![0.0; width] }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: vec![0.0; self.gamma.len()], beta: vec![0.0; self.beta.len()] }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        assert_eq!(x.cols, self.gamma.len(), "layer norm width");
        let n = x.cols as f64;
        let mut normalized = Mat::zeros(x.rows, x.cols);
        let mut out = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..x.cols {
                let z = (row[c] - mean) * inv;
                normalized.set(r, c, z);
                out.set(r, c, z * self.gamma[c] + self.beta[c]);
            }
        }
        (out, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let n = dy.cols as f64;
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let z = cache.normalized.row(r);
            let g = dy.row(r);
            let mut dz = vec![0.0; dy.cols];
            for c in 0..dy.cols {
                grad.gamma[c] += g[c] * z[c];
                grad.beta[c] += g[c];
                dz[c] = g[c] * self.gamma[c];
            }
            let sum_dz: f64 = dz.iter().sum();
            let sum_dz_z = dot(&dz, z);
            let inv = cache.inv_std[r];
            for c in 0..dy.cols {
                dx.set(r, c, inv / n * (n * dz[c] - sum_dz - z[c] * sum_dz_z));
            }
        }
        dx
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub fn softmax_rows_backward(probs: &Mat, dprobs: &Mat) -> Mat {
    let mut out = Mat::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let g = dprobs.row(r);
        let inner = dot(p, g);
        for (o, (pv, gv)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pv * (gv - inner);
        }
    }
    out
}

fn head_slice(m: &Mat, head: usize, head_dim: usize) -> Mat {
    Mat::from_fn(m.rows, head_dim, |r, c| m.get(r, head * head_dim + c))
}

fn add_head_slice(dst: &mut Mat, src: &Mat, head: usize) {
    let head_dim = src.cols;
    for r in 0..src.rows {
        for c in 0..head_dim {
            let i = r * dst.cols + head * head_dim + c;
            dst.data[i] += src.get(r, c);
        }
    }
}

/// Scaled dot-product attention split into `heads` equal channel groups,
/// outputs concatenated back along channels. Returns the output and the
/// per-head attention weights (`queries × keys`).
pub fn multi_head_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Result<(Mat, Vec<Mat>)> {
    if heads == 0 || q.cols % heads != 0 {
        return Err(param_err!("{} channels not divisible into {heads} heads", q.cols));
    }
    if k.cols != q.cols || v.cols != q.cols || k.rows != v.rows {
        return Err(shape_err!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let head_dim = q.cols / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Mat::zeros(q.rows, q.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (head_slice(q, h, head_dim), head_slice(k, h, head_dim), head_slice(v, h, head_dim));
        let mut logits = qh.matmul_t(&kh);
        logits.scale(scale);
        let p = softmax_rows(&logits);
        add_head_slice(&mut out, &p.matmul(&vh), h);
        probs.push(p);
    }
    Ok((out, probs))
}

/// Gradients `(dq, dk, dv)` of [`multi_head_attention`].
pub fn multi_head_attention_backward(q: &Mat, k: &Mat, v: &Mat, probs: &[Mat], dout: &Mat) -> (Mat, Mat, Mat) {
    let heads = probs.len();
    let head_dim = q.cols / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Mat::zeros(q.rows, q.cols);
    let mut dk = Mat::zeros(k.rows, k.cols);
    let mut dv = Mat::zeros(v.rows, v.cols);
    for (h, p) in probs.iter().enumerate() {
        let (qh, kh, vh) = (head_slice(q, h, head_dim), head_slice(k, h, head_dim), head_slice(v, h, head_dim));
        let doh = head_slice(dout, h, head_dim);
        add_head_slice(&mut dv, &p.t_matmul(&doh), h);
        let dp = doh.matmul_t(&vh);
        let mut dlogits = softmax_rows_backward(p, &dp);
        dlogits.scale(scale);
        add_head_slice(&mut dq, &dlogits.matmul(&kh), h);
        add_head_slice(&mut dk, &dlogits.t_matmul(&qh), h);
    }
    (dq, dk, dv)
}

/// 2-D convolution over a channel-last grid with zero "same" padding
/// (`kernel / 2`) and an output size of `ceil(input / stride)`.
///
/// Weights are laid out `[out][ky][kx][in]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * kernel * kernel * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kernel, self.stride, self.in_channels, self.out_channels)
    }

    #[inline]
    pub fn weight_index(&self, o: usize, ky: usize, kx: usize, i: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels + i
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(param_err!("conv kernel {} must be odd", self.kernel));
        }
        if self.stride == 0 {
            return Err(param_err!("conv stride must be positive"));
        }
        if self.weight.len() != self.out_channels * self.kernel * self.kernel * self.in_channels
            || self.bias.len() != self.out_channels
        {
            return Err(shape_err!(
                "conv weights ({} / {}) do not match {}x{}x{}x{}",
                self.weight.len(),
                self.bias.len(),
                self.out_channels,
                self.kernel,
                self.kernel,
                self.in_channels
            ));
        }
        Ok(())
    }

    /// Copies the receptive field of output `(oy, ox)` into `patch`
    /// (`[ky][kx][in]` order), with zeros where the window leaves the input.
    #[inline]
    fn gather(&self, input: &Grid, oy: usize, ox: usize, patch: &mut [f64]) {
        let cin = self.in_channels;
        let pad = (self.kernel / 2) as isize;
        for ky in 0..self.kernel {
            let iy = (oy * self.stride) as isize + ky as isize - pad;
            for kx in 0..self.kernel {
                let ix = (ox * self.stride) as isize + kx as isize - pad;
                let dst = &mut patch[(ky * self.kernel + kx) * cin..][..cin];
                if iy < 0 || ix < 0 || iy >= input.height as isize || ix >= input.width as isize {
                    dst.fill(0.0);
                } else {
                    dst.copy_from_slice(input.pixel(iy as usize, ix as usize));
                }
            }
        }
    }

    /// Adds `patch` back onto the in-bounds positions of the receptive field of `(oy, ox)`.
    #[inline]
    fn scatter(&self, target: &mut Grid, oy: usize, ox: usize, patch: &[f64]) {
        let cin = self.in_channels;
        let pad = (self.kernel / 2) as isize;
        for ky in 0..self.kernel {
            let iy = (oy * self.stride) as isize + ky as isize - pad;
            if iy < 0 || iy >= target.height as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride) as isize + kx as isize - pad;
                if ix < 0 || ix >= target.width as isize {
                    continue;
                }
                let src = &patch[(ky * self.kernel + kx) * cin..][..cin];
                for (t, &v) in target.pixel_mut(iy as usize, ix as usize).iter_mut().zip(src) {
                    *t += v;
                }
            }
        }
    }

    pub fn forward(&self, input: &Grid) -> Result<Grid> {
        self.validate()?;
        if input.channels != self.in_channels {
            return Err(shape_err!("conv expects {} input channels, got {}", self.in_channels, input.channels));
        }
        let (oh, ow) = self.output_size(input.height, input.width);
        let mut out = Grid::zeros(oh, ow, self.out_channels);
        let kk = self.kernel * self.kernel * self.in_channels;
        let mut patch = vec![0.0; kk];
        for oy in 0..oh {
            for ox in 0..ow {
                self.gather(input, oy, ox, &mut patch);
                for ((o, w), b) in out.pixel_mut(oy, ox).iter_mut().zip(self.weight.chunks_exact(kk)).zip(&self.bias) {
                    *o = b + dot(w, &patch);
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients into `grad`, returns the input gradient.
    pub fn backward(&self, input: &Grid, dout: &Grid, grad: &mut Conv2d) -> Grid {
        let kk = self.kernel * self.kernel * self.in_channels;
        let mut dinput = Grid::zeros(input.height, input.width, self.in_channels);
        let mut patch = vec![0.0; kk];
        let mut dpatch = vec![0.0; kk];
        for oy in 0..dout.height {
            for ox in 0..dout.width {
                let g = dout.pixel(oy, ox);
                for (b, g) in grad.bias.iter_mut().zip(g) {
                    *b += g;
                }
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                self.gather(input, oy, ox, &mut patch);
                dpatch.fill(0.0);
                for ((&g, w), gw) in g.iter().zip(self.weight.chunks_exact(kk)).zip(grad.weight.chunks_exact_mut(kk)) {
                    if g != 0.0 {
                        axpy(g, &patch, gw);
                        axpy(g, w, &mut dpatch);
                    }
                }
                self.scatter(&mut dinput, oy, ox, &dpatch);
            }
        }
        dinput
    }
}

/// Source coordinate pair and weights for half-pixel 2× bilinear upsampling
/// along one axis: output index `o` samples input position `(o + 0.5)/2 − 0.5`,
/// clamped to the valid range.
#[inline]
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 2× upsampling with half-pixel centres and edge clamping.
pub fn upsample2x(input: &Grid) -> Grid {
    let (h, w, c) = input.shape();
    let mut out = Grid::zeros(2 * h, 2 * w, c);
    for oy in 0..2 * h {
        let (y0, y1, fy) = upsample_taps(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, fx) = upsample_taps(ox, w);
            let weights = [
                ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                ((y0, x1), (1.0 - fy) * fx),
                ((y1, x0), fy * (1.0 - fx)),
                ((y1, x1), fy * fx),
            ];
            let dst = out.index(oy, ox, 0);
            for ((y, x), wgt) in weights {
                let src = input.index(y, x, 0);
                for ch in 0..c {
                    out.data[dst + ch] += wgt * input.data[src + ch];
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward(dout: &Grid) -> Grid {
    let (h, w, c) = (dout.height / 2, dout.width / 2, dout.channels);
    let mut din = Grid::zeros(h, w, c);
    for oy in 0..2 * h {
        let (y0, y1, fy) = upsample_taps(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, fx) = upsample_taps(ox, w);
            let weights = [
                ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                ((y0, x1), (1.0 - fy) * fx),
                ((y1, x0), fy * (1.0 - fx)),
                ((y1, x1), fy * fx),
            ];
            let src = dout.index(oy, ox, 0);
            for ((y, x), wgt) in weights {
                let dst = din.index(y, x, 0);
                for ch in 0..c {
                    din.data[dst + ch] += wgt * dout.data[src + ch];
                }
            }
        }
    }
    din
}

pub fn apply_activation(grid: &Grid, act: Activation) -> Grid {
    let data = grid.data.iter().map(|&v| act.apply(v)).collect();
    Grid { height: grid.height, width: grid.width, channels: grid.channels, data }
}

pub fn activation_backward(pre: &Grid, dout: &Grid, act: Activation) -> Grid {
    let data = pre.data.iter().zip(&dout.data).map(|(&z, &g)| g * act.derivative(z)).collect();
    Grid { height: pre.height, width: pre.width, channels: pre.channels, data }
}
