//! Synthetic tampering: parametric regions, copy-move, splice with optional
//! Poisson blending, removal with diffusion fill, and realism degradations.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::image::RgbImage;
use crate::tensor::Plane;

/// Allowed fraction of the image covered by a region.
pub const AREA_RANGE: (f64, f64) = (0.01, 0.3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TamperKind {
    Pristine,
    CopyMove,
    Splice,
    Removal,
}

impl TamperKind {
    pub const ALL: [TamperKind; 4] = [TamperKind::Pristine, TamperKind::CopyMove, TamperKind::Splice, TamperKind::Removal];

    pub fn name(self) -> &'static str {
        match self {
            TamperKind::Pristine => "pristine",
            TamperKind::CopyMove => "copy_move",
            TamperKind::Splice => "splice",
            TamperKind::Removal => "removal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum DegradationSpec {
    /// Additive noise with standard deviation `sigma` on the 0–255 scale.
    GaussianNoise { sigma: f64 },
    /// Baseline JPEG round trip at `quality` in 1..=100.
    Jpeg { quality: u8 },
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DegradationSpec::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(param_err!("noise sigma {sigma} must be finite and non-negative"))
            }
            DegradationSpec::Jpeg { quality } if !(1..=100).contains(&quality) => Err(param_err!("JPEG quality {quality} outside 1..=100")),
            _ => Ok(()),
        }
    }
}

/// JPEG encode/decode round trip, supplied by the caller.
pub trait JpegCodec {
    fn roundtrip(&self, image: &RgbImage, quality: u8) -> Result<RgbImage>;
}

/// Codec that rejects every request; for callers that never use JPEG.
pub struct NoJpeg;

impl JpegCodec for NoJpeg {
    fn roundtrip(&self, _image: &RgbImage, _quality: u8) -> Result<RgbImage> {
        Err(param_err!("no JPEG codec available"))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "shape", rename_all = "snake_case"))]
pub enum RegionSpec {
    /// Rotated ellipse; centre and semi-axes in pixels, rotation in radians.
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, rotation: f64 },
    /// Simple polygon with `(y, x)` vertices in pixels.
    Polygon { vertices: Vec<(f64, f64)> },
}

fn point_in_polygon(vertices: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut inside = false;
    let n = vertices.len();
    for i in 0..n {
        let (yi, xi) = vertices[i];
        let (yj, xj) = vertices[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

impl RegionSpec {
    /// Whether the pixel centred at `(y + ½, x + ½)` lies inside the region.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match self {
            RegionSpec::Ellipse { cy, cx, ry, rx, rotation } => {
                let (s, c) = rotation.sin_cos();
                let (dy, dx) = (py - cy, px - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            RegionSpec::Polygon { vertices } => point_in_polygon(vertices, py, px),
        }
    }

    /// `(y_min, y_max, x_min, x_max)` of the continuous shape.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        match self {
            RegionSpec::Ellipse { cy, cx, ry, rx, rotation } => {
                let (s, c) = rotation.sin_cos();
                let hx = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let hy = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                (cy - hy, cy + hy, cx - hx, cx + hx)
            }
            RegionSpec::Polygon { vertices } => vertices.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(y, x)| (a.min(y), b.max(y), c.min(x), d.max(x)),
            ),
        }
    }

    /// Binary raster (1 inside) of size `height × width`.
    pub fn rasterize(&self, height: usize, width: usize) -> Plane {
        Plane::from_fn(height, width, |y, x| if self.contains(y, x) { 1.0 } else { 0.0 })
    }

    /// Checks the shape lies inside the image and covers an allowed area fraction.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if let RegionSpec::Polygon { vertices } = self {
            if vertices.len() < 3 {
                return Err(param_err!("polygon needs at least 3 vertices"));
            }
        }
        if let RegionSpec::Ellipse { ry, rx, .. } = self {
            if !(*ry > 0.0 && *rx > 0.0) {
                return Err(param_err!("ellipse axes must be positive"));
            }
        }
        let (y0, y1, x0, x1) = self.extent();
        if !(y0 >= 0.0 && x0 >= 0.0 && y1 <= height as f64 && x1 <= width as f64) {
            return Err(Error::Placement("region extends outside the image".into()));
        }
        let frac = self.rasterize(height, width).count_nonzero() as f64 / (height * width) as f64;
        if !(AREA_RANGE.0..=AREA_RANGE.1).contains(&frac) {
            return Err(param_err!("region covers {frac:.4} of the image, outside [{}, {}]", AREA_RANGE.0, AREA_RANGE.1));
        }
        Ok(())
    }

    /// Draws a valid region: half ellipses, half star-shaped polygons.
    pub fn random(height: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let side = height.min(width) as f64;
        for _ in 0..1000 {
            let frac = rng.random_range(AREA_RANGE.0 * 1.3..AREA_RANGE.1 * 0.8);
            let radius = (frac * (height * width) as f64 / PI).sqrt();
            let region = if rng.random::<bool>() {
                let aspect: f64 = rng.random_range(0.6..1.6);
                let (ry, rx) = (radius * aspect.sqrt(), radius / aspect.sqrt());
                let margin = ry.max(rx) + 1.0;
                if 2.0 * margin >= side {
                    continue;
                }
                RegionSpec::Ellipse {
                    cy: rng.random_range(margin..height as f64 - margin),
                    cx: rng.random_range(margin..width as f64 - margin),
                    ry,
                    rx,
                    rotation: rng.random_range(0.0..PI),
                }
            } else {
                let n = rng.random_range(5..=8);
                let r_max = radius * 1.3 + 1.0;
                if 2.0 * r_max >= side {
                    continue;
                }
                let cy = rng.random_range(r_max..height as f64 - r_max);
                let cx = rng.random_range(r_max..width as f64 - r_max);
                let phase = rng.random_range(0.0..2.0 * PI);
                let vertices = (0..n)
                    .map(|i| {
                        let a = phase + 2.0 * PI * i as f64 / n as f64;
                        let r = radius * rng.random_range(0.75..1.3);
                        let (s, c) = a.sin_cos();
                        (cy + r * s, cx + r * c)
                    })
                    .collect();
                RegionSpec::Polygon { vertices }
            };
            if region.validate(height, width).is_ok() {
                return Ok(region);
            }
        }
        Err(Error::Placement("could not draw a valid region".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TamperSample {
    pub image: RgbImage,
    /// 1 marks a manipulated pixel.
    pub mask: Plane,
    pub label: u8,
    pub kind: TamperKind,
    pub degradations: Vec<DegradationSpec>,
    pub seed: u64,
}

impl TamperSample {
    /// Checks the label/mask/kind invariant.
    pub fn check_consistency(&self) -> Result<()> {
        let nonzero = self.mask.count_nonzero();
        let tampered = self.kind != TamperKind::Pristine;
        if (self.label == 1) != tampered || (nonzero > 0) != tampered || self.label > 1 {
            return Err(param_err!("label {} / kind {:?} / {} mask pixels disagree", self.label, self.kind, nonzero));
        }
        if self.mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(param_err!("mask is not binary"));
        }
        Ok(())
    }
}

fn tampered(image: RgbImage, mask: Plane, kind: TamperKind, seed: u64) -> TamperSample {
    TamperSample { image, mask, label: 1, kind, degradations: Vec::new(), seed }
}

/// Duplicates `region` at `offset = (dy, dx)` within the same image.
pub fn copy_move(image: &RgbImage, region: &RegionSpec, offset: (isize, isize)) -> Result<TamperSample> {
    let (h, w) = (image.height(), image.width());
    region.validate(h, w)?;
    let src = region.rasterize(h, w);
    let (dy, dx) = offset;
    let mut dst = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if src.get(y, x) == 0.0 {
                continue;
            }
            let (ty, tx) = (y as isize + dy, x as isize + dx);
            if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                return Err(Error::Placement("copy-move destination leaves the image".into()));
            }
            if src.get(ty as usize, tx as usize) != 0.0 {
                return Err(Error::Placement("copy-move destination overlaps the source".into()));
            }
            dst.set(ty as usize, tx as usize, 1.0);
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if dst.get(y, x) != 0.0 {
                out.set_pixel(y, x, image.pixel((y as isize - dy) as usize, (x as isize - dx) as usize));
            }
        }
    }
    Ok(tampered(out, dst, TamperKind::CopyMove, 0))
}

/// Pastes `src`'s content inside `region` onto `dst`, optionally Poisson-blended.
pub fn splice(src: &RgbImage, dst: &RgbImage, region: &RegionSpec, blend: bool) -> Result<TamperSample> {
    if (src.height(), src.width()) != (dst.height(), dst.width()) {
        return Err(shape_err!("splice source {}x{} vs target {}x{}", src.height(), src.width(), dst.height(), dst.width()));
    }
    let (h, w) = (dst.height(), dst.width());
    region.validate(h, w)?;
    let mask = region.rasterize(h, w);
    let image = if blend {
        poisson_blend(src, dst, &mask)?
    } else {
        RgbImage::from_fn(h, w, |y, x| if mask.get(y, x) != 0.0 { src.pixel(y, x) } else { dst.pixel(y, x) })?
    };
    Ok(tampered(image, mask, TamperKind::Splice, 0))
}

/// Convergence summary of a Poisson/Laplace solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize).then_some((ny as usize, nx as usize))
    })
}

/// Residual of `Σ_q f_q − deg·f_p = −b_p` at a masked pixel, with `f` equal to the
/// boundary values outside the mask and out-of-image neighbours ignored.
fn residual_at(f: &Plane, rhs: &Plane, y: usize, x: usize) -> (f64, f64) {
    let (h, w) = f.shape();
    let mut sum = 0.0;
    let mut deg = 0.0;
    for (ny, nx) in neighbors(y, x, h, w) {
        sum += f.get(ny, nx);
        deg += 1.0;
    }
    (rhs.get(y, x) + sum - deg * f.get(y, x), deg)
}

fn masked_pixels(mask: &Plane) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| mask.get(y, x) != 0.0).collect()
}

/// Solves `deg_p f_p − Σ_q f_q = b_p` on the mask with `f = boundary` elsewhere by
/// red-black over-relaxation, starting from `init` inside the mask.
pub fn solve_masked_poisson(boundary: &Plane, rhs: &Plane, mask: &Plane, init: f64) -> Result<(Plane, SolveStats)> {
    let (h, w) = boundary.shape();
    if rhs.shape() != (h, w) || mask.shape() != (h, w) {
        return Err(shape_err!("solver planes disagree in shape"));
    }
    let pixels = masked_pixels(mask);
    if pixels.len() == h * w {
        return Err(param_err!("region covers the whole image; nothing to fill from"));
    }
    let mut f = boundary.clone();
    for &(y, x) in &pixels {
        f.set(y, x, init);
    }
    if pixels.is_empty() {
        return Ok((f, SolveStats { iterations: 0, residual: 0.0 }));
    }
    let (y0, y1, x0, x1) = pixels.iter().fold((usize::MAX, 0, usize::MAX, 0), |(a, b, c, d), &(y, x)| (a.min(y), b.max(y), c.min(x), d.max(x)));
    let n = (y1 - y0).max(x1 - x0) as f64 + 3.0;
    let omega = 2.0 / (1.0 + (PI / n).sin());
    let max_residual = |f: &Plane| pixels.iter().map(|&(y, x)| residual_at(f, rhs, y, x).0.abs()).fold(0.0, f64::max);
    let initial = max_residual(&f);
    let tolerance = (1e-4 * initial).min(1e-6).max(1e-12);
    let cap = 10 * (h + w);
    let mut residual = initial;
    let mut iterations = 0;
    while residual > tolerance {
        if iterations == cap {
            return Err(Error::NotConverged { iterations, residual });
        }
        for color in 0..2 {
            for &(y, x) in pixels.iter().filter(|(y, x)| (y + x) % 2 == color) {
                let (r, deg) = residual_at(&f, rhs, y, x);
                let v = f.get(y, x) + omega * r / deg;
                f.set(y, x, v);
            }
        }
        iterations += 1;
        residual = max_residual(&f);
    }
    Ok((f, SolveStats { iterations, residual }))
}

/// Maximum equation residual of a solution on the mask.
pub fn poisson_residual(f: &Plane, rhs: &Plane, mask: &Plane) -> f64 {
    masked_pixels(mask).into_iter().map(|(y, x)| residual_at(f, rhs, y, x).0.abs()).fold(0.0, f64::max)
}

/// Guidance term `b_p = Σ_q (g_p − g_q)` over in-image neighbours: minus the discrete Laplacian.
pub fn guidance_rhs(guide: &Plane) -> Plane {
    let (h, w) = guide.shape();
    Plane::from_fn(h, w, |y, x| neighbors(y, x, h, w).map(|(ny, nx)| guide.get(y, x) - guide.get(ny, nx)).sum())
}

/// Single-channel gradient-domain blend; returns the unclamped solution.
pub fn poisson_blend_channel(patch: &Plane, target: &Plane, mask: &Plane) -> Result<(Plane, SolveStats)> {
    let rhs = guidance_rhs(patch);
    let init = boundary_mean(target, mask);
    solve_masked_poisson(target, &rhs, mask, init)
}

/// Blends `patch` into `target` inside `mask`, clamped to `[0, 1]`.
pub fn poisson_blend(patch: &RgbImage, target: &RgbImage, mask: &Plane) -> Result<RgbImage> {
    if (patch.height(), patch.width()) != (target.height(), target.width()) || mask.shape() != (target.height(), target.width()) {
        return Err(shape_err!("poisson_blend inputs disagree in shape"));
    }
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        channels.push(poisson_blend_channel(&patch.channel(c), &target.channel(c), mask)?.0);
    }
    let clamped: Vec<Plane> = channels.into_iter().map(|p| Plane { data: p.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..p }).collect();
    RgbImage::from_channels([&clamped[0], &clamped[1], &clamped[2]])
}

/// Mean of unmasked pixels 4-adjacent to the mask.
fn boundary_mean(values: &Plane, mask: &Plane) -> f64 {
    let (h, w) = values.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0.0 && neighbors(y, x, h, w).any(|(ny, nx)| mask.get(ny, nx) != 0.0) {
                sum += values.get(y, x);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Harmonic (diffusion) fill of one channel inside the mask.
pub fn inpaint_channel(values: &Plane, mask: &Plane) -> Result<(Plane, SolveStats)> {
    let rhs = Plane::zeros(values.height, values.width);
    solve_masked_poisson(values, &rhs, mask, boundary_mean(values, mask))
}

/// Erases `region` and fills it by diffusion from its boundary.
pub fn remove_and_inpaint(image: &RgbImage, region: &RegionSpec) -> Result<TamperSample> {
    let (h, w) = (image.height(), image.width());
    region.validate(h, w)?;
    let mask = region.rasterize(h, w);
    Ok(tampered(inpaint(image, &mask)?, mask, TamperKind::Removal, 0))
}

/// Diffusion fill of an arbitrary mask.
pub fn inpaint(image: &RgbImage, mask: &Plane) -> Result<RgbImage> {
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        let (mut p, _) = inpaint_channel(&image.channel(c), mask)?;
        p.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        channels.push(p);
    }
    RgbImage::from_channels([&channels[0], &channels[1], &channels[2]])
}

/// Seeded additive Gaussian noise, `sigma` on the 0–255 scale, clipped to `[0, 1]`.
pub fn add_gaussian_noise(image: &RgbImage, sigma: f64, seed: u64) -> Result<RgbImage> {
    DegradationSpec::GaussianNoise { sigma }.validate()?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| param_err!("{e}"))?;
    let data = image.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
    RgbImage::from_clamped(image.height(), image.width(), data)
}

pub fn degrade(image: &RgbImage, spec: DegradationSpec, seed: u64, codec: &dyn JpegCodec) -> Result<RgbImage> {
    spec.validate()?;
    match spec {
        DegradationSpec::GaussianNoise { sigma } => add_gaussian_noise(image, sigma, seed),
        DegradationSpec::Jpeg { quality } => codec.roundtrip(image, quality),
    }
}

/// Procedural stand-in for a natural photograph: a smooth two-colour gradient,
/// soft colour blobs, a few hard-edged shapes, and per-image sensor noise.
pub fn procedural_source(size: usize, seed: u64) -> Result<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let c0: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let c1: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let (sa, ca) = angle.sin_cos();
    struct Blob {
        cy: f64,
        cx: f64,
        r: f64,
        color: [f64; 3],
        hard: bool,
    }
    let blobs: Vec<Blob> = (0..rng.random_range(3..7))
        .map(|_| Blob {
            cy: rng.random_range(0.0..s),
            cx: rng.random_range(0.0..s),
            r: rng.random_range(0.08..0.3) * s,
            color: [rng.random(), rng.random(), rng.random()],
            hard: rng.random_bool(0.3),
        })
        .collect();
    let noise_sigma = rng.random_range(0.005..0.08);
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| param_err!("{e}"))?;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = (((py / s - 0.5) * sa + (px / s - 0.5) * ca) + 0.75).clamp(0.0, 1.5) / 1.5;
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            for b in &blobs {
                let d2 = ((py - b.cy).powi(2) + (px - b.cx).powi(2)) / (b.r * b.r);
                let weight = if b.hard { f64::from(u8::from(d2 <= 1.0)) * 0.85 } else { 0.8 * (-d2).exp() };
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - weight) + b.color[c] * weight;
                }
            }
            for v in rgb {
                data.push(v + normal.sample(&mut rng));
            }
        }
    }
    RgbImage::from_clamped(size, size, data)
}

/// Settings for generating a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub count: usize,
    pub image_size: usize,
    /// Relative weights of pristine, copy_move, splice, removal.
    pub mix: KindMix,
    /// Probability a splice is Poisson-blended rather than hard-pasted.
    pub blend_probability: f64,
    /// Probability a sample receives one degradation.
    pub degrade_probability: f64,
    /// Upper bound on the degradation noise sigma (0–255 scale).
    pub max_noise_sigma: f64,
    /// Lowest degradation JPEG quality.
    pub min_jpeg_quality: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            image_size: 256,
            mix: KindMix::default(),
            blend_probability: 0.5,
            degrade_probability: 0.3,
            max_noise_sigma: 3.0,
            min_jpeg_quality: 75,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct KindMix {
    pub pristine: f64,
    pub copy_move: f64,
    pub splice: f64,
    pub removal: f64,
}

impl Default for KindMix {
    fn default() -> Self {
        Self { pristine: 0.25, copy_move: 0.25, splice: 0.25, removal: 0.25 }
    }
}

impl KindMix {
    pub fn weights(&self) -> [f64; 4] {
        [self.pristine, self.copy_move, self.splice, self.removal]
    }

    /// Per-kind counts by largest remainder, summing to `n`.
    pub fn counts(&self, n: usize) -> Result<[usize; 4]> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || total <= 0.0 {
            return Err(param_err!("kind mix weights must be non-negative with a positive sum"));
        }
        let exact: Vec<f64> = w.iter().map(|v| v / total * n as f64).collect();
        let mut counts = [0usize; 4];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let assigned: usize = counts.iter().sum();
        for &k in order.iter().take(n - assigned) {
            counts[k] += 1;
        }
        Ok(counts)
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(param_err!("image size {} too small", self.image_size));
        }
        for p in [self.blend_probability, self.degrade_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(param_err!("probability {p} outside [0, 1]"));
            }
        }
        DegradationSpec::GaussianNoise { sigma: self.max_noise_sigma }.validate()?;
        DegradationSpec::Jpeg { quality: self.min_jpeg_quality }.validate()?;
        self.mix.counts(self.count).map(|_| ())
    }

    /// Kind of every sample index: the mix's counts in a seeded order.
    pub fn kind_schedule(&self, seed: u64) -> Result<Vec<TamperKind>> {
        let counts = self.mix.counts(self.count)?;
        let mut kinds: Vec<TamperKind> = TamperKind::ALL.iter().zip(counts).flat_map(|(&k, n)| core::iter::repeat_n(k, n)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..kinds.len()).rev() {
            kinds.swap(i, rng.random_range(0..=i));
        }
        Ok(kinds)
    }
}

/// Per-sample seed derived from the corpus seed.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Source image for a sample: from `sources` if any, otherwise procedural.
fn pick_source(sources: &[RgbImage], size: usize, rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    if sources.is_empty() {
        procedural_source(size, rng.random())
    } else {
        Ok(sources[rng.random_range(0..sources.len())].clone())
    }
}

fn random_copy_move(image: &RgbImage, rng: &mut ChaCha8Rng) -> Result<TamperSample> {
    let (h, w) = (image.height(), image.width());
    for _ in 0..200 {
        let region = RegionSpec::random(h, w, rng)?;
        let (y0, y1, x0, x1) = region.extent();
        for _ in 0..50 {
            let dy = rng.random_range(-(y0.floor() as i64)..=(h as f64 - y1).floor() as i64) as isize;
            let dx = rng.random_range(-(x0.floor() as i64)..=(w as f64 - x1).floor() as i64) as isize;
            match copy_move(image, &region, (dy, dx)) {
                Ok(s) => return Ok(s),
                Err(Error::Placement(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Err(Error::Placement("no disjoint copy-move placement found".into()))
}

/// Generates sample `index` of a corpus. Depends only on `(config, sources, seed, index)`.
pub fn generate_sample(
    config: &SynthConfig,
    kind: TamperKind,
    sources: &[RgbImage],
    base_seed: u64,
    index: usize,
    codec: &dyn JpegCodec,
) -> Result<TamperSample> {
    let seed = sample_seed(base_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    if sources.iter().any(|s| s.height() != size || s.width() != size) {
        return Err(shape_err!("source images must be {size}x{size}"));
    }
    let base = pick_source(sources, size, &mut rng)?;
    let mut sample = match kind {
        TamperKind::Pristine => TamperSample {
            image: base,
            mask: Plane::zeros(size, size),
            label: 0,
            kind,
            degradations: Vec::new(),
            seed,
        },
        TamperKind::CopyMove => random_copy_move(&base, &mut rng)?,
        TamperKind::Splice => {
            let donor = pick_source(sources, size, &mut rng)?;
            let region = RegionSpec::random(size, size, &mut rng)?;
            let blend = rng.random_bool(config.blend_probability);
            splice(&donor, &base, &region, blend)?
        }
        TamperKind::Removal => {
            let region = RegionSpec::random(size, size, &mut rng)?;
            remove_and_inpaint(&base, &region)?
        }
    };
    sample.seed = seed;
    if rng.random_bool(config.degrade_probability) {
        let spec = if rng.random::<bool>() {
            DegradationSpec::GaussianNoise { sigma: rng.random_range(0.0..=config.max_noise_sigma) }
        } else {
            DegradationSpec::Jpeg { quality: rng.random_range(config.min_jpeg_quality..=100) }
        };
        sample.image = degrade(&sample.image, spec, rng.random(), codec)?;
        sample.degradations.push(spec);
    }
    sample.check_consistency()?;
    Ok(sample)
}

/// Human-readable one-line description of a degradation list.
pub fn describe_degradations(list: &[DegradationSpec]) -> String {
    if list.is_empty() {
        return "none".to_string();
    }
    list.iter()
        .map(|d| match d {
            DegradationSpec::GaussianNoise { sigma } => alloc::format!("noise(sigma={sigma:.3})"),
            DegradationSpec::Jpeg { quality } => alloc::format!("jpeg(q={quality})"),
        })
        .collect::<Vec<_>>()
        .join(",")
}
