//! Orthonormal 2-D DCT round trip and high-pass filtering that produce the
//! high-frequency companion `X_h` of an RGB image.

use alloc::vec::Vec;
use core::f64::consts::PI;


#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{param_err, Error, Result};
use crate::image::{HighFreqImage, RgbImage};
use crate::tensor::{Mat, Plane};

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Type-II DCT coefficients of a single channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub coeffs: Plane,
}

impl FrequencyGrid {
    pub fn height(&self) -> usize {
        self.coeffs.height
    }

    pub fn width(&self) -> usize {
        self.coeffs.width
    }
}

/// Fraction-of-band cutoff for the anti-diagonal high-pass mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighPassSpec {
    alpha: f64,
}

impl HighPassSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(param_err!("high-pass alpha {alpha} outside [0, 1]"));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for HighPassSpec {
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

pub fn to_luminance(image: &RgbImage) -> Plane {
    let data = image
        .data()
        .chunks_exact(3)
        .map(|px| LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2])
        .collect();
    Plane { height: image.height(), width: image.width(), data }
}

/// Orthonormal DCT-II basis: row `k` holds `s_k cos(π(2i+1)k / 2n)`.
pub fn dct_basis(n: usize) -> Mat {
    let n_f = n as f64;
    Mat::from_fn(n, n, |k, i| {
        let scale = if k == 0 { (1.0 / n_f).sqrt() } else { (2.0 / n_f).sqrt() };
        scale * libm::cos(PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n_f))
    })
}

fn check_finite(plane: &Plane, what: &str) -> Result<()> {
    if plane.height == 0 || plane.width == 0 {
        return Err(param_err!("{what}: empty grid"));
    }
    if !plane.is_finite() {
        return Err(Error::NonFinite(alloc::format!("{what} input")));
    }
    Ok(())
}

fn plane_to_mat(p: &Plane) -> Mat {
    Mat { rows: p.height, cols: p.width, data: p.data.clone() }
}

fn mat_to_plane(m: Mat) -> Plane {
    Plane { height: m.rows, width: m.cols, data: m.data }
}

/// `B_H · X · B_Wᵀ`
pub fn dct2(channel: &Plane) -> Result<FrequencyGrid> {
    check_finite(channel, "dct2")?;
    let bh = dct_basis(channel.height);
    let bw = dct_basis(channel.width);
    let coeffs = bh.matmul(&plane_to_mat(channel)).matmul_t(&bw);
    Ok(FrequencyGrid { coeffs: mat_to_plane(coeffs) })
}

/// `B_Hᵀ · Y · B_W`
pub fn idct2(freq: &FrequencyGrid) -> Result<Plane> {
    check_finite(&freq.coeffs, "idct2")?;
    let bh = dct_basis(freq.height());
    let bw = dct_basis(freq.width());
    Ok(mat_to_plane(bh.t_matmul(&plane_to_mat(&freq.coeffs)).matmul(&bw)))
}

/// Zero where `u + v < alpha·(H + W)`, one elsewhere.
pub fn high_pass_mask(height: usize, width: usize, spec: HighPassSpec) -> Result<Plane> {
    if height == 0 || width == 0 {
        return Err(param_err!("high-pass mask needs a non-empty grid"));
    }
    let cutoff = spec.alpha * (height + width) as f64;
    Ok(Plane::from_fn(height, width, |u, v| if ((u + v) as f64) < cutoff { 0.0 } else { 1.0 }))
}

pub fn apply_mask(freq: &FrequencyGrid, mask: &Plane) -> FrequencyGrid {
    assert_eq!(freq.coeffs.shape(), mask.shape());
    let data: Vec<f64> = freq.coeffs.data.iter().zip(&mask.data).map(|(c, m)| c * m).collect();
    FrequencyGrid { coeffs: Plane { height: mask.height, width: mask.width, data } }
}

/// `X_h = idct2(mask ⊙ dct2(luma(X)))`
pub fn extract_high_frequency(image: &RgbImage, spec: HighPassSpec) -> Result<HighFreqImage> {
    high_pass_luminance(&to_luminance(image), spec)
}

/// High-pass filters an already single-channel grid.
pub fn high_pass_luminance(luma: &Plane, spec: HighPassSpec) -> Result<Plane> {
    let freq = dct2(luma)?;
    let mask = high_pass_mask(luma.height, luma.width, spec)?;
    idct2(&apply_mask(&freq, &mask))
}
