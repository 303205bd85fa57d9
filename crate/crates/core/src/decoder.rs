//! Patch decoder layer: patches attend to the updated object prototypes, then
//! boundary-sensitive contextual incoherence modeling adds a local cosine
//! similarity map back onto the feature grid.

#[allow(unused_imports)]
use num_traits::Float;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{gelu, gelu_grad, multi_head_attention, multi_head_attention_backward, LayerNorm, LayerNormCache};
use crate::tensor::{dot, Grid, Mat, Plane};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DecoderLayerParams {
    pub norm_patches: LayerNorm,
    pub norm_objects: LayerNorm,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_mlp1: Mat,
    pub w_mlp2: Mat,
}

impl DecoderLayerParams {
    pub fn zeros(width: usize, ff_width: usize) -> Self {
        Self {
            norm_patches: LayerNorm::new(width),
            norm_objects: LayerNorm::new(width),
            w_q: Mat::zeros(width, width),
            w_k: Mat::zeros(width, width),
            w_v: Mat::zeros(width, width),
            w_mlp1: Mat::zeros(width, ff_width),
            w_mlp2: Mat::zeros(ff_width, width),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm_patches: self.norm_patches.zeros_like(),
            norm_objects: self.norm_objects.zeros_like(),
            w_q: Mat::zeros(self.w_q.rows, self.w_q.cols),
            w_k: Mat::zeros(self.w_k.rows, self.w_k.cols),
            w_v: Mat::zeros(self.w_v.rows, self.w_v.cols),
            w_mlp1: Mat::zeros(self.w_mlp1.rows, self.w_mlp1.cols),
            w_mlp2: Mat::zeros(self.w_mlp2.rows, self.w_mlp2.cols),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows
    }

    fn check(&self, patches: &Mat, objects: &Mat) -> Result<()> {
        let c = self.width();
        let square = |m: &Mat| m.shape() == (c, c);
        if !(square(&self.w_q) && square(&self.w_k) && square(&self.w_v))
            || self.w_mlp1.rows != c
            || self.w_mlp2.cols != c
            || self.w_mlp1.cols != self.w_mlp2.rows
        {
            return Err(shape_err!("inconsistent decoder parameter shapes"));
        }
        if patches.cols != c || objects.cols != c {
            return Err(shape_err!("decoder of width {c} got patches {:?} and objects {:?}", patches.shape(), objects.shape()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefineCache {
    ln_patches: LayerNormCache,
    ln_objects: LayerNormCache,
    patches_norm: Mat,
    objects_norm: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: alloc::vec::Vec<Mat>,
    p_hat: Mat,
    hidden: Mat,
}

/// `p̂ = p + attn(LN(p) W_q, LN(o) W_k, LN(o) W_v)`, `p̄ = p̂ + MLP(p̂)`.
pub fn refine_patches(patches: &Mat, objects: &Mat, params: &DecoderLayerParams, heads: usize) -> Result<Mat> {
    Ok(refine_forward(patches, objects, params, heads)?.0)
}

pub fn refine_forward(patches: &Mat, objects: &Mat, params: &DecoderLayerParams, heads: usize) -> Result<(Mat, RefineCache)> {
    params.check(patches, objects)?;
    let (patches_norm, ln_patches) = params.norm_patches.forward(patches);
    let (objects_norm, ln_objects) = params.norm_objects.forward(objects);
    let q = patches_norm.matmul(&params.w_q);
    let k = objects_norm.matmul(&params.w_k);
    let v = objects_norm.matmul(&params.w_v);
    let (attended, probs) = multi_head_attention(&q, &k, &v, heads)?;
    let p_hat = patches.add(&attended);
    let hidden = p_hat.matmul(&params.w_mlp1);
    let out = p_hat.add(&hidden.map(gelu).matmul(&params.w_mlp2));
    Ok((out, RefineCache { ln_patches, ln_objects, patches_norm, objects_norm, q, k, v, probs, p_hat, hidden }))
}

/// Returns `(d patches, d objects)`.
pub fn refine_backward(params: &DecoderLayerParams, cache: &RefineCache, d_out: &Mat, grad: &mut DecoderLayerParams) -> (Mat, Mat) {
    let activated = cache.hidden.map(gelu);
    grad.w_mlp2.add_assign(&activated.t_matmul(d_out));
    let d_act = d_out.matmul_t(&params.w_mlp2);
    let d_hidden = Mat {
        data: d_act.data.iter().zip(&cache.hidden.data).map(|(g, &z)| g * gelu_grad(z)).collect(),
        ..d_act
    };
    grad.w_mlp1.add_assign(&cache.p_hat.t_matmul(&d_hidden));
    let d_hat = d_out.add(&d_hidden.matmul_t(&params.w_mlp1));

    let (dq, dk, dv) = multi_head_attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &d_hat);
    grad.w_q.add_assign(&cache.patches_norm.t_matmul(&dq));
    grad.w_k.add_assign(&cache.objects_norm.t_matmul(&dk));
    grad.w_v.add_assign(&cache.objects_norm.t_matmul(&dv));
    let d_patches_norm = dq.matmul_t(&params.w_q);
    let d_objects_norm = dk.matmul_t(&params.w_k).add(&dv.matmul_t(&params.w_v));

    let mut d_patches = d_hat;
    d_patches.add_assign(&params.norm_patches.backward(&cache.ln_patches, &d_patches_norm, &mut grad.norm_patches));
    let d_objects = params.norm_objects.backward(&cache.ln_objects, &d_objects_norm, &mut grad.norm_objects);
    (d_patches, d_objects)
}

/// Mean local cosine similarity over a `window × window` neighbourhood.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub values: Plane,
    pub window: usize,
}

/// Cosine similarity; zero when either vector is zero.
#[inline]
fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(param_err!("similarity window {window} must be odd and positive"));
    }
    Ok(())
}

/// Visits every `(centre, neighbour)` pair of the edge-replicated window.
#[inline]
fn for_each_pair(height: usize, width: usize, window: usize, mut f: impl FnMut(usize, usize)) {
    let r = (window / 2) as isize;
    for y in 0..height {
        for x in 0..width {
            for dy in -r..=r {
                let ny = (y as isize + dy).clamp(0, height as isize - 1) as usize;
                for dx in -r..=r {
                    let nx = (x as isize + dx).clamp(0, width as isize - 1) as usize;
                    f(y * width + x, ny * width + nx);
                }
            }
        }
    }
}

fn cell_norms(grid: &Grid) -> alloc::vec::Vec<f64> {
    grid.data.chunks_exact(grid.channels).map(|v| dot(v, v).sqrt()).collect()
}

pub fn local_cosine_similarity(grid: &Grid, window: usize) -> Result<SimilarityMap> {
    check_window(window)?;
    if grid.channels == 0 {
        return Err(param_err!("similarity needs at least one channel"));
    }
    let norms = cell_norms(grid);
    let c = grid.channels;
    let scale = 1.0 / (window * window) as f64;
    let mut values = Plane::zeros(grid.height, grid.width);
    for_each_pair(grid.height, grid.width, window, |j, n| {
        let (a, b) = (&grid.data[j * c..(j + 1) * c], &grid.data[n * c..(n + 1) * c]);
        values.data[j] += scale * cosine(a, b, norms[j], norms[n]);
    });
    Ok(SimilarityMap { values, window })
}

/// Gradient of `Σ_j dS[j]·S[j]` with respect to the grid.
pub fn local_cosine_similarity_backward(grid: &Grid, window: usize, d_sim: &Plane) -> Grid {
    let norms = cell_norms(grid);
    let c = grid.channels;
    let scale = 1.0 / (window * window) as f64;
    let mut d_grid = Grid::zeros(grid.height, grid.width, c);
    for_each_pair(grid.height, grid.width, window, |j, n| {
        let (na, nb) = (norms[j], norms[n]);
        let g = d_sim.data[j] * scale;
        if na == 0.0 || nb == 0.0 || g == 0.0 {
            return;
        }
        let a = &grid.data[j * c..(j + 1) * c];
        let b = &grid.data[n * c..(n + 1) * c];
        let cos = dot(a, b) / (na * nb);
        for i in 0..c {
            let da = b[i] / (na * nb) - cos * a[i] / (na * na);
            let db = a[i] / (na * nb) - cos * b[i] / (nb * nb);
            d_grid.data[j * c + i] += g * da;
            d_grid.data[n * c + i] += g * db;
        }
    });
    d_grid
}

/// Reshapes a `2L × C` sequence to the `H_s × W_s × 2C` grid whose cell `t`
/// holds RGB token `t` in channels `[0, C)` and frequency token `L + t` in `[C, 2C)`.
pub fn sequence_to_grid(tokens: &Mat, height: usize, width: usize) -> Result<Grid> {
    let l = height * width;
    if tokens.rows != 2 * l {
        return Err(shape_err!("{} tokens do not form two {height}x{width} grids", tokens.rows));
    }
    let c = tokens.cols;
    let mut grid = Grid::zeros(height, width, 2 * c);
    for t in 0..l {
        let cell = &mut grid.data[t * 2 * c..(t + 1) * 2 * c];
        cell[..c].copy_from_slice(tokens.row(t));
        cell[c..].copy_from_slice(tokens.row(l + t));
    }
    Ok(grid)
}

/// Inverse of [`sequence_to_grid`].
pub fn grid_to_sequence(grid: &Grid) -> Result<Mat> {
    if grid.channels % 2 != 0 {
        return Err(shape_err!("grid with {} channels cannot split into two halves", grid.channels));
    }
    let c = grid.channels / 2;
    let l = grid.height * grid.width;
    let mut tokens = Mat::zeros(2 * l, c);
    for t in 0..l {
        let cell = &grid.data[t * 2 * c..(t + 1) * 2 * c];
        tokens.row_mut(t).copy_from_slice(&cell[..c]);
        tokens.row_mut(l + t).copy_from_slice(&cell[c..]);
    }
    Ok(tokens)
}

/// Adds the local similarity of the channel-concatenated grid to every channel.
pub fn bcim(p_bar: &Mat, height: usize, width: usize, window: usize) -> Result<Mat> {
    Ok(bcim_forward(p_bar, height, width, window)?.0)
}

pub fn bcim_forward(p_bar: &Mat, height: usize, width: usize, window: usize) -> Result<(Mat, SimilarityMap)> {
    let grid = sequence_to_grid(p_bar, height, width)?;
    let sim = local_cosine_similarity(&grid, window)?;
    let l = height * width;
    let mut out = p_bar.clone();
    for t in 0..l {
        let s = sim.values.data[t];
        out.row_mut(t).iter_mut().for_each(|v| *v += s);
        out.row_mut(l + t).iter_mut().for_each(|v| *v += s);
    }
    Ok((out, sim))
}

pub fn bcim_backward(p_bar: &Mat, height: usize, width: usize, window: usize, d_out: &Mat) -> Mat {
    let l = height * width;
    let d_sim = Plane::from_fn(height, width, |y, x| {
        let t = y * width + x;
        d_out.row(t).iter().sum::<f64>() + d_out.row(l + t).iter().sum::<f64>()
    });
    let grid = sequence_to_grid(p_bar, height, width).expect("shape checked in forward");
    let d_grid = local_cosine_similarity_backward(&grid, window, &d_sim);
    let mut d = grid_to_sequence(&d_grid).expect("even channel count");
    d.add_assign(d_out);
    d
}

/// Spatial layout and options shared by every decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderGeometry {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub heads: usize,
    pub use_bcim: bool,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    refine: RefineCache,
    p_bar: Mat,
    pub similarity: Option<SimilarityMap>,
}

/// `refine_patches` followed by `bcim` (or identity when disabled).
pub fn decoder_layer(patches: &Mat, objects: &Mat, params: &DecoderLayerParams, geom: DecoderGeometry) -> Result<Mat> {
    Ok(decoder_forward(patches, objects, params, geom)?.0)
}

pub fn decoder_forward(patches: &Mat, objects: &Mat, params: &DecoderLayerParams, geom: DecoderGeometry) -> Result<(Mat, DecoderCache)> {
    if patches.rows != 2 * geom.height * geom.width {
        return Err(shape_err!("{} patches for a {}x{} grid", patches.rows, geom.height, geom.width));
    }
    let (p_bar, refine) = refine_forward(patches, objects, params, geom.heads)?;
    let (out, similarity) = if geom.use_bcim {
        let (out, sim) = bcim_forward(&p_bar, geom.height, geom.width, geom.window)?;
        (out, Some(sim))
    } else {
        (p_bar.clone(), None)
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("patch decoder".into()));
    }
    Ok((out, DecoderCache { refine, p_bar, similarity }))
}

/// Returns `(d patches, d objects)`.
pub fn decoder_backward(
    params: &DecoderLayerParams,
    cache: &DecoderCache,
    geom: DecoderGeometry,
    d_out: &Mat,
    grad: &mut DecoderLayerParams,
) -> (Mat, Mat) {
    let d_bar = if geom.use_bcim {
        bcim_backward(&cache.p_bar, geom.height, geom.width, geom.window, d_out)
    } else {
        d_out.clone()
    };
    refine_backward(params, &cache.refine, &d_bar, grad)
}
