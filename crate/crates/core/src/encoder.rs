//! Object encoder layer: learnable object prototypes query the multimodal
//! patch sequence, interact across the object axis, and pass through a
//! residual feed-forward block.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{gelu, gelu_grad, multi_head_attention, multi_head_attention_backward, LayerNorm, LayerNormCache};
use crate::tensor::Mat;

/// Per-head object→patch attention weights, each `N × 2L` with rows on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub heads: Vec<Mat>,
}

impl AffinityMatrix {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Element-wise mean over heads.
    pub fn mean_over_heads(&self) -> Mat {
        let mut acc = Mat::zeros(self.heads[0].rows, self.heads[0].cols);
        for h in &self.heads {
            acc.add_assign(h);
        }
        acc.scale(1.0 / self.heads.len() as f64);
        acc
    }

    /// Largest deviation of any row sum from one, and the smallest entry.
    pub fn simplex_violation(&self) -> (f64, f64) {
        let mut worst_sum: f64 = 0.0;
        let mut min_entry = f64::INFINITY;
        for h in &self.heads {
            for r in 0..h.rows {
                let row = h.row(r);
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                min_entry = row.iter().copied().fold(min_entry, f64::min);
            }
        }
        (worst_sum, min_entry)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EncoderLayerParams {
    pub norm_objects: LayerNorm,
    pub norm_patches: LayerNorm,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    /// `N × N` cross-object interaction.
    pub w_c: Mat,
    pub w_ff1: Mat,
    pub w_ff2: Mat,
}

impl EncoderLayerParams {
    pub fn zeros(width: usize, objects: usize, ff_width: usize) -> Self {
        Self {
            norm_objects: LayerNorm::new(width),
            norm_patches: LayerNorm::new(width),
            w_q: Mat::zeros(width, width),
            w_k: Mat::zeros(width, width),
            w_v: Mat::zeros(width, width),
            w_c: Mat::zeros(objects, objects),
            w_ff1: Mat::zeros(width, ff_width),
            w_ff2: Mat::zeros(ff_width, width),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm_objects: self.norm_objects.zeros_like(),
            norm_patches: self.norm_patches.zeros_like(),
            w_q: Mat::zeros(self.w_q.rows, self.w_q.cols),
            w_k: Mat::zeros(self.w_k.rows, self.w_k.cols),
            w_v: Mat::zeros(self.w_v.rows, self.w_v.cols),
            w_c: Mat::zeros(self.w_c.rows, self.w_c.cols),
            w_ff1: Mat::zeros(self.w_ff1.rows, self.w_ff1.cols),
            w_ff2: Mat::zeros(self.w_ff2.rows, self.w_ff2.cols),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows
    }

    pub fn objects(&self) -> usize {
        self.w_c.rows
    }

    fn check(&self, objects: &Mat, patches: &Mat) -> Result<()> {
        let c = self.width();
        let square = |m: &Mat| m.rows == c && m.cols == c;
        if !(square(&self.w_q) && square(&self.w_k) && square(&self.w_v))
            || self.w_ff1.rows != c
            || self.w_ff2.cols != c
            || self.w_ff1.cols != self.w_ff2.rows
            || self.w_c.rows != self.w_c.cols
        {
            return Err(shape_err!("inconsistent encoder parameter shapes"));
        }
        if objects.cols != c || patches.cols != c || objects.rows != self.objects() {
            return Err(shape_err!(
                "encoder with {} objects of width {c} got objects {:?} and patches {:?}",
                self.objects(),
                objects.shape(),
                patches.shape()
            ));
        }
        Ok(())
    }
}

/// `softmax((LN(o) W_q)(LN(p) W_k)ᵀ / √(C/h))` per head.
pub fn compute_affinity(objects: &Mat, patches: &Mat, params: &EncoderLayerParams, heads: usize) -> Result<AffinityMatrix> {
    params.check(objects, patches)?;
    let (on, _) = params.norm_objects.forward(objects);
    let (pn, _) = params.norm_patches.forward(patches);
    let q = on.matmul(&params.w_q);
    let k = pn.matmul(&params.w_k);
    let (_, probs) = multi_head_attention(&q, &k, &k, heads)?;
    let aff = AffinityMatrix { heads: probs };
    if aff.heads.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFinite("object-patch affinity".into()));
    }
    Ok(aff)
}

/// `ô = o + A · (p̃ W_v)` with heads concatenated along channels, where `p̃`
/// is the layer-normalized patch sequence used as keys and values.
pub fn update_objects(objects: &Mat, affinity: &AffinityMatrix, normalized_patches: &Mat, w_v: &Mat) -> Result<Mat> {
    let heads = affinity.num_heads();
    let c = objects.cols;
    if heads == 0 || c % heads != 0 || w_v.shape() != (c, c) || normalized_patches.cols != c {
        return Err(shape_err!("update_objects shapes"));
    }
    if affinity.heads.iter().any(|a| a.rows != objects.rows || a.cols != normalized_patches.rows) {
        return Err(shape_err!("affinity does not match {} objects × {} patches", objects.rows, normalized_patches.rows));
    }
    let v = normalized_patches.matmul(w_v);
    let head_dim = c / heads;
    let mut out = objects.clone();
    for (h, a) in affinity.heads.iter().enumerate() {
        for n in 0..objects.rows {
            for t in 0..v.rows {
                let w = a.get(n, t);
                if w == 0.0 {
                    continue;
                }
                for d in 0..head_dim {
                    let col = h * head_dim + d;
                    out.data[n * c + col] += w * v.get(t, col);
                }
            }
        }
    }
    Ok(out)
}

/// `õ = ô + (ôᵀ W_c)ᵀ = ô + W_cᵀ ô`
pub fn cross_object_interaction(o_hat: &Mat, w_c: &Mat) -> Result<Mat> {
    if w_c.shape() != (o_hat.rows, o_hat.rows) {
        return Err(shape_err!("W_c {:?} for {} objects", w_c.shape(), o_hat.rows));
    }
    Ok(o_hat.add(&w_c.t_matmul(o_hat)))
}

/// `o' = õ + GELU(õ W_1) W_2`
pub fn object_feedforward(o_tilde: &Mat, w_ff1: &Mat, w_ff2: &Mat) -> Result<Mat> {
    if w_ff1.rows != o_tilde.cols || w_ff1.cols != w_ff2.rows || w_ff2.cols != o_tilde.cols {
        return Err(shape_err!("feed-forward shapes"));
    }
    Ok(o_tilde.add(&o_tilde.matmul(w_ff1).map(gelu).matmul(w_ff2)))
}

/// Everything [`encoder_backward`] needs.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    ln_objects: LayerNormCache,
    ln_patches: LayerNormCache,
    objects_norm: Mat,
    patches_norm: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    o_hat: Mat,
    o_tilde: Mat,
    hidden: Mat,
    pub affinity: AffinityMatrix,
}

/// Full layer: LN → affinity → residual update → interaction → feed-forward.
pub fn encoder_layer(objects: &Mat, patches: &Mat, params: &EncoderLayerParams, heads: usize) -> Result<(Mat, AffinityMatrix)> {
    let (out, cache) = encoder_forward(objects, patches, params, heads)?;
    Ok((out, cache.affinity))
}

pub fn encoder_forward(objects: &Mat, patches: &Mat, params: &EncoderLayerParams, heads: usize) -> Result<(Mat, EncoderCache)> {
    params.check(objects, patches)?;
    let (objects_norm, ln_objects) = params.norm_objects.forward(objects);
    let (patches_norm, ln_patches) = params.norm_patches.forward(patches);
    let q = objects_norm.matmul(&params.w_q);
    let k = patches_norm.matmul(&params.w_k);
    let v = patches_norm.matmul(&params.w_v);
    let (attended, probs) = multi_head_attention(&q, &k, &v, heads)?;
    let affinity = AffinityMatrix { heads: probs };
    let o_hat = objects.add(&attended);
    let o_tilde = cross_object_interaction(&o_hat, &params.w_c)?;
    let hidden = o_tilde.matmul(&params.w_ff1);
    let out = o_tilde.add(&hidden.map(gelu).matmul(&params.w_ff2));
    if !out.is_finite() {
        return Err(Error::NonFinite("object encoder".into()));
    }
    let cache = EncoderCache { ln_objects, ln_patches, objects_norm, patches_norm, q, k, v, o_hat, o_tilde, hidden, affinity };
    Ok((out, cache))
}

/// Accumulates parameter gradients into `grad`; returns `(d objects, d patches)`.
pub fn encoder_backward(params: &EncoderLayerParams, cache: &EncoderCache, d_out: &Mat, grad: &mut EncoderLayerParams) -> (Mat, Mat) {
    // feed-forward
    let activated = cache.hidden.map(gelu);
    grad.w_ff2.add_assign(&activated.t_matmul(d_out));
    let d_act = d_out.matmul_t(&params.w_ff2);
    let d_hidden = Mat {
        data: d_act.data.iter().zip(&cache.hidden.data).map(|(g, &z)| g * gelu_grad(z)).collect(),
        ..d_act
    };
    grad.w_ff1.add_assign(&cache.o_tilde.t_matmul(&d_hidden));
    let d_tilde = d_out.add(&d_hidden.matmul_t(&params.w_ff1));

    // õ = ô + W_cᵀ ô
    grad.w_c.add_assign(&cache.o_hat.matmul_t(&d_tilde));
    let d_hat = d_tilde.add(&params.w_c.matmul(&d_tilde));

    // ô = o + attention
    let (dq, dk, dv) = multi_head_attention_backward(&cache.q, &cache.k, &cache.v, &cache.affinity.heads, &d_hat);
    grad.w_q.add_assign(&cache.objects_norm.t_matmul(&dq));
    grad.w_k.add_assign(&cache.patches_norm.t_matmul(&dk));
    grad.w_v.add_assign(&cache.patches_norm.t_matmul(&dv));
    let d_objects_norm = dq.matmul_t(&params.w_q);
    let d_patches_norm = dk.matmul_t(&params.w_k).add(&dv.matmul_t(&params.w_v));

    let mut d_objects = d_hat;
    d_objects.add_assign(&params.norm_objects.backward(&cache.ln_objects, &d_objects_norm, &mut grad.norm_objects));
    let d_patches = params.norm_patches.backward(&cache.ln_patches, &d_patches_norm, &mut grad.norm_patches);
    (d_objects, d_patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::random_mat;
    use crate::tensor::dot;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_params(rng: &mut ChaCha8Rng, c: usize, n: usize, ff: usize) -> EncoderLayerParams {
        let mut p = EncoderLayerParams::zeros(c, n, ff);
        for m in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_c, &mut p.w_ff1, &mut p.w_ff2] {
            *m = random_mat(rng, m.rows, m.cols);
            m.scale(0.5);
        }
        for ln in [&mut p.norm_objects, &mut p.norm_patches] {
            ln.gamma.iter_mut().for_each(|g| *g = 1.0 + 0.3 * (rng.random::<f64>() - 0.5));
            ln.beta.iter_mut().for_each(|b| *b = 0.2 * (rng.random::<f64>() - 0.5));
        }
        p
    }

    fn tensors_mut(p: &mut EncoderLayerParams) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("norm_objects.gamma", &mut p.norm_objects.gamma),
            ("norm_objects.beta", &mut p.norm_objects.beta),
            ("norm_patches.gamma", &mut p.norm_patches.gamma),
            ("norm_patches.beta", &mut p.norm_patches.beta),
            ("w_q", &mut p.w_q.data),
            ("w_k", &mut p.w_k.data),
            ("w_v", &mut p.w_v.data),
            ("w_c", &mut p.w_c.data),
            ("w_ff1", &mut p.w_ff1.data),
            ("w_ff2", &mut p.w_ff2.data),
        ]
    }

    #[test]
    fn zero_query_weights_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = random_params(&mut rng, 8, 3, 16);
        p.w_q = Mat::zeros(8, 8);
        let a = compute_affinity(&random_mat(&mut rng, 3, 8), &random_mat(&mut rng, 10, 8), &p, 2).unwrap();
        for h in &a.heads {
            assert!(h.data.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        }
    }

    #[test]
    fn affinity_scalar_softmax() {
        // One object, two tokens, single head, C = 2. After layer norm every
        // non-constant width-2 row maps to ±(s, −s) with s = 1/√(1 + 4ε), and a
        // constant row maps to zero; hand-set projections place the logits at (0, ln 3).
        let mut p = EncoderLayerParams::zeros(2, 1, 2);
        let o = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let patches = Mat::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let s = 1.0 / (1.0 + 4.0 * crate::nn::LAYER_NORM_EPS).sqrt();
        p.w_q = Mat::from_vec(2, 2, vec![1.0 / s, 0.0, 0.0, 0.0]).unwrap();
        let target = 3f64.ln() * 2f64.sqrt();
        p.w_k = Mat::from_vec(2, 2, vec![target / s, 0.0, 0.0, 0.0]).unwrap();
        let a = compute_affinity(&o, &patches, &p, 1).unwrap();
        assert!((a.heads[0].get(0, 0) - 0.25).abs() < 1e-9, "{:?}", a.heads[0]);
        assert!((a.heads[0].get(0, 1) - 0.75).abs() < 1e-9);
    }

    #[test]
    fn update_objects_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, t, c) = (3, 5, 4);
        let o = random_mat(&mut rng, n, c);
        let pn = random_mat(&mut rng, t, c);
        let aff = AffinityMatrix { heads: vec![crate::nn::softmax_rows(&random_mat(&mut rng, n, t)); 2] };
        assert_eq!(update_objects(&o, &aff, &pn, &Mat::zeros(c, c)).unwrap(), o);

        // one-hot selection of token 2
        let one_hot = Mat::from_fn(n, t, |_, j| if j == 2 { 1.0 } else { 0.0 });
        let w_v = random_mat(&mut rng, c, c);
        let out = update_objects(&o, &AffinityMatrix { heads: vec![one_hot] }, &pn, &w_v).unwrap();
        let sel = Mat::from_vec(1, c, pn.row(2).to_vec()).unwrap().matmul(&w_v);
        for i in 0..n {
            for j in 0..c {
                assert!((out.get(i, j) - o.get(i, j) - sel.get(0, j)).abs() < 1e-14);
            }
        }

        // triple loop oracle with two heads
        let out = update_objects(&o, &aff, &pn, &w_v).unwrap();
        let hd = c / 2;
        for i in 0..n {
            for col in 0..c {
                let a = &aff.heads[col / hd];
                let mut acc = o.get(i, col);
                for tok in 0..t {
                    let mut v = 0.0;
                    for k in 0..c {
                        v += pn.get(tok, k) * w_v.get(k, col);
                    }
                    acc += a.get(i, tok) * v;
                }
                assert!((out.get(i, col) - acc).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn interaction_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = random_mat(&mut rng, 2, 3);
        assert_eq!(cross_object_interaction(&o, &Mat::zeros(2, 2)).unwrap(), o);
        let doubled = cross_object_interaction(&o, &Mat::identity(2)).unwrap();
        assert!(doubled.data.iter().zip(&o.data).all(|(d, v)| (d - 2.0 * v).abs() < 1e-15));

        // W_c = [[0,1],[0,0]]: W_cᵀ = [[0,0],[1,0]] so row 1 gains row 0
        let w_c = Mat::from_vec(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = cross_object_interaction(&o, &w_c).unwrap();
        let w_c_t = w_c.transpose();
        for i in 0..2 {
            for j in 0..3 {
                let prod: f64 = (0..2).map(|k| w_c_t.get(i, k) * o.get(k, j)).sum();
                assert_eq!(out.get(i, j), o.get(i, j) + prod);
            }
        }
        assert_eq!(out.row(0), o.row(0));
        assert!(cross_object_interaction(&o, &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn feedforward_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = random_mat(&mut rng, 2, 3);
        assert_eq!(object_feedforward(&o, &random_mat(&mut rng, 3, 5), &Mat::zeros(5, 3)).unwrap(), o);
        let zero = Mat::zeros(2, 3);
        assert_eq!(object_feedforward(&zero, &random_mat(&mut rng, 3, 5), &random_mat(&mut rng, 5, 3)).unwrap(), zero);
        let one = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        let out = object_feedforward(&one, &one, &one).unwrap();
        assert!((out.get(0, 0) - 1.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn residual_identity_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_params(&mut rng, 8, 4, 16);
        p.w_v = Mat::zeros(8, 8);
        p.w_c = Mat::zeros(4, 4);
        p.w_ff2 = Mat::zeros(16, 8);
        let o = random_mat(&mut rng, 4, 8);
        for tokens in [2, 7, 30] {
            let (out, aff) = encoder_layer(&o, &random_mat(&mut rng, tokens, 8), &p, 2).unwrap();
            assert_eq!(out, o);
            assert_eq!(aff.heads[0].shape(), (4, tokens));
        }
        assert!(encoder_layer(&random_mat(&mut rng, 3, 8), &random_mat(&mut rng, 5, 8), &p, 2).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, n, t, ff, heads) = (4, 3, 6, 8, 2);
        let params = random_params(&mut rng, c, n, ff);
        let o = random_mat(&mut rng, n, c);
        let p = random_mat(&mut rng, t, c);
        let probe = random_mat(&mut rng, n, c);
        let loss = |params: &EncoderLayerParams, o: &Mat, p: &Mat| dot(&encoder_layer(o, p, params, heads).unwrap().0.data, &probe.data);

        let (_, cache) = encoder_forward(&o, &p, &params, heads).unwrap();
        let mut grad = params.zeros_like();
        let (d_o, d_p) = encoder_backward(&params, &cache, &probe, &mut grad);

        let step = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let mut worst: f64 = 0.0;
        let mut perturbed = params.clone();
        let grads: Vec<Vec<f64>> = tensors_mut(&mut grad).into_iter().map(|(_, v)| v.clone()).collect();
        for (gi, analytic) in grads.iter().enumerate() {
            for i in 0..analytic.len() {
                let orig = tensors_mut(&mut perturbed)[gi].1[i];
                tensors_mut(&mut perturbed)[gi].1[i] = orig + step;
                let plus = loss(&perturbed, &o, &p);
                tensors_mut(&mut perturbed)[gi].1[i] = orig - step;
                let minus = loss(&perturbed, &o, &p);
                tensors_mut(&mut perturbed)[gi].1[i] = orig;
                worst = worst.max(rel(analytic[i], (plus - minus) / (2.0 * step)));
            }
        }
        for (analytic, which) in [(&d_o, 0), (&d_p, 1)] {
            for i in 0..analytic.data.len() {
                let (mut op, mut pp) = (o.clone(), p.clone());
                let target = if which == 0 { &mut op } else { &mut pp };
                let orig = target.data[i];
                target.data[i] = orig + step;
                let plus = loss(&params, &op, &pp);
                let target = if which == 0 { &mut op } else { &mut pp };
                target.data[i] = orig - step;
                let minus = loss(&params, &op, &pp);
                worst = worst.max(rel(analytic.data[i], (plus - minus) / (2.0 * step)));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
        Mat::from_fn(m.rows, m.cols, |r, c| m.get(perm[r], c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn affinity_rows_on_simplex(seed in any::<u64>(), n in 1usize..5, t in 1usize..20, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = random_params(&mut rng, 8, n, 8);
            p.w_q.scale(scale);
            let a = compute_affinity(&random_mat(&mut rng, n, 8), &random_mat(&mut rng, t, 8), &p, 4).unwrap();
            let (sum_err, min_entry) = a.simplex_violation();
            prop_assert!(sum_err <= 1e-6);
            prop_assert!(min_entry >= 0.0);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let params = random_params(&mut rng, 4, n, 8);
            let o = random_mat(&mut rng, n, 4);
            let p = random_mat(&mut rng, 9, 4);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut permuted = params.clone();
            permuted.w_c = Mat::from_fn(n, n, |r, c| params.w_c.get(perm[r], perm[c]));
            let lhs = encoder_layer(&permute_rows(&o, &perm), &p, &permuted, 2).unwrap().0;
            let rhs = permute_rows(&encoder_layer(&o, &p, &params, 2).unwrap().0, &perm);
            prop_assert!(lhs.data.iter().zip(&rhs.data).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}
