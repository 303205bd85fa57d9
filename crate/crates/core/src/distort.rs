//! Post-processing distortions for robustness evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::image::RgbImage;
use crate::synth::{add_gaussian_noise, JpegCodec};
use crate::tensor::Plane;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Distortion {
    Identity,
    /// Downscale by `scale`, then restore the original size.
    Resize { scale: f64 },
    /// Odd `kernel` size, `σ = kernel / 6`.
    GaussianBlur { kernel: usize },
    /// `sigma` on the 0–255 scale.
    GaussianNoise { sigma: f64 },
    Jpeg { quality: u8 },
}

impl Distortion {
    pub fn label(&self) -> String {
        match *self {
            Distortion::Identity => "identity".into(),
            Distortion::Resize { scale } => format!("resize_{scale}"),
            Distortion::GaussianBlur { kernel } => format!("blur_k{kernel}"),
            Distortion::GaussianNoise { sigma } => format!("noise_sigma{sigma}"),
            Distortion::Jpeg { quality } => format!("jpeg_q{quality}"),
        }
    }
}

/// The nine robustness conditions, identity first.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionGrid {
    pub rows: Vec<Distortion>,
}

impl Default for DistortionGrid {
    fn default() -> Self {
        Self {
            rows: vec![
                Distortion::Identity,
                Distortion::Resize { scale: 0.78 },
                Distortion::Resize { scale: 0.25 },
                Distortion::GaussianBlur { kernel: 3 },
                Distortion::GaussianBlur { kernel: 15 },
                Distortion::GaussianNoise { sigma: 3.0 },
                Distortion::GaussianNoise { sigma: 15.0 },
                Distortion::Jpeg { quality: 100 },
                Distortion::Jpeg { quality: 50 },
            ],
        }
    }
}

fn sample_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear resize of one plane with half-pixel alignment and edge clamping.
pub fn resize_bilinear(plane: &Plane, height: usize, width: usize) -> Plane {
    let (h, w) = plane.shape();
    Plane::from_fn(height, width, |y, x| {
        let sy = sample_coord(y, h, height);
        let sx = sample_coord(x, w, width);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = plane.get(y0, x0) * (1.0 - fx) + plane.get(y0, x1) * fx;
        let bottom = plane.get(y1, x0) * (1.0 - fx) + plane.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize (pixel centres).
pub fn resize_nearest(plane: &Plane, height: usize, width: usize) -> Plane {
    let (h, w) = plane.shape();
    Plane::from_fn(height, width, |y, x| {
        let sy = (((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize).min(w - 1);
        plane.get(sy, sx)
    })
}

fn map_channels(image: &RgbImage, f: impl Fn(&Plane) -> Plane) -> Result<RgbImage> {
    let c: Vec<Plane> = (0..3).map(|c| f(&image.channel(c))).collect();
    RgbImage::from_channels([&c[0], &c[1], &c[2]])
}

pub fn resize_image(image: &RgbImage, height: usize, width: usize) -> Result<RgbImage> {
    map_channels(image, |p| resize_bilinear(p, height, width))
}

/// Normalized 1-D Gaussian kernel of odd length with `σ = len / 6`.
pub fn gaussian_kernel(len: usize) -> Result<Vec<f64>> {
    if len % 2 == 0 {
        return Err(param_err!("blur kernel {len} must be odd"));
    }
    let sigma = len as f64 / 6.0;
    let r = (len / 2) as f64;
    let raw: Vec<f64> = (0..len).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(plane: &Plane, kernel: usize) -> Result<Plane> {
    let k = gaussian_kernel(kernel)?;
    let r = (kernel / 2) as isize;
    let (h, w) = plane.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal = Plane::from_fn(h, w, |y, x| k.iter().enumerate().map(|(i, kv)| kv * plane.get(y, clamp(x as isize + i as isize - r, w))).sum());
    Ok(Plane::from_fn(h, w, |y, x| k.iter().enumerate().map(|(i, kv)| kv * horizontal.get(clamp(y as isize + i as isize - r, h), x)).sum()))
}

/// Applies a distortion to an image and its evaluation mask. Both come back at
/// the input size; masks go through nearest-neighbour resizing only.
pub fn apply_distortion(image: &RgbImage, mask: &Plane, distortion: Distortion, seed: u64, codec: &dyn JpegCodec) -> Result<(RgbImage, Plane)> {
    let (h, w) = (image.height(), image.width());
    match distortion {
        Distortion::Identity => Ok((image.clone(), mask.clone())),
        Distortion::Resize { scale } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(param_err!("resize scale {scale} must be positive"));
            }
            let (sh, sw) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
            let small = resize_image(image, sh, sw)?;
            let small_mask = resize_nearest(mask, sh, sw);
            Ok((resize_image(&small, h, w)?, resize_nearest(&small_mask, h, w)))
        }
        Distortion::GaussianBlur { kernel } => {
            gaussian_kernel(kernel)?;
            Ok((map_channels(image, |p| gaussian_blur(p, kernel).expect("validated kernel"))?, mask.clone()))
        }
        Distortion::GaussianNoise { sigma } => Ok((add_gaussian_noise(image, sigma, seed)?, mask.clone())),
        Distortion::Jpeg { quality } => Ok((codec.roundtrip(image, quality)?, mask.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::NoJpeg;

    #[test]
    fn grid_has_nine_rows_identity_first() {
        let g = DistortionGrid::default();
        assert_eq!(g.rows.len(), 9);
        assert_eq!(g.rows[0], Distortion::Identity);
        let labels: Vec<String> = g.rows.iter().map(Distortion::label).collect();
        assert_eq!(labels[1], "resize_0.78");
        assert_eq!(labels[6], "noise_sigma15");
    }

    #[test]
    fn resize_cases() {
        let p = Plane::from_fn(4, 4, |y, x| (y * 4 + x) as f64);
        assert_eq!(resize_bilinear(&p, 4, 4), p);
        assert_eq!(resize_nearest(&p, 4, 4), p);
        let half = resize_bilinear(&p, 2, 2);
        // centre of output (0,0) samples input (0.5, 0.5): mean of 0,1,4,5
        assert_eq!(half.get(0, 0), 2.5);
        let near = resize_nearest(&p, 2, 2);
        assert_eq!(near.data, vec![5.0, 7.0, 13.0, 15.0]);
        let flat = Plane::filled(5, 7, 0.3);
        assert!(resize_bilinear(&flat, 11, 3).data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn blur_cases() {
        let k = gaussian_kernel(15).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(gaussian_kernel(4).is_err());
        let flat = Plane::filled(6, 6, 0.7);
        assert!(gaussian_blur(&flat, 3).unwrap().data.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let mut impulse = Plane::zeros(9, 9);
        impulse.set(4, 4, 1.0);
        let b = gaussian_blur(&impulse, 3).unwrap();
        let k3 = gaussian_kernel(3).unwrap();
        assert!((b.get(4, 4) - k3[1] * k3[1]).abs() < 1e-15);
        assert!((b.get(3, 5) - k3[0] * k3[2]).abs() < 1e-15);
    }

    #[test]
    fn distortions_keep_size_and_mask_binary() {
        let img = RgbImage::from_fn(32, 32, |y, x| [y as f64 / 32.0, x as f64 / 32.0, 0.5]).unwrap();
        let mask = Plane::from_fn(32, 32, |y, x| if (8..20).contains(&y) && (5..17).contains(&x) { 1.0 } else { 0.0 });
        for d in DistortionGrid::default().rows {
            if matches!(d, Distortion::Jpeg { .. }) {
                assert!(apply_distortion(&img, &mask, d, 0, &NoJpeg).is_err());
                continue;
            }
            let (i, m) = apply_distortion(&img, &mask, d, 1, &NoJpeg).unwrap();
            assert_eq!((i.height(), i.width(), m.shape()), (32, 32, (32, 32)));
            assert!(m.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let (i, m) = apply_distortion(&img, &mask, Distortion::Identity, 0, &NoJpeg).unwrap();
        assert_eq!((i, m), (img, mask));
    }
}
