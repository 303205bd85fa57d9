//! Full detector: frequency extraction, stems, alternating encoder/decoder
//! stack, classification and localization heads, joint loss and exact
//! gradients.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::backbone::{embed_tokens, patchify, unpatchify, Stem, StemCache, StemLayerSpec};
use crate::decoder::{
    decoder_backward, decoder_forward, grid_to_sequence, sequence_to_grid, DecoderCache, DecoderGeometry, DecoderLayerParams,
};
use crate::encoder::{encoder_backward, encoder_forward, AffinityMatrix, EncoderCache, EncoderLayerParams};
use crate::error::{param_err, shape_err, Error, Result};
use crate::frequency::{extract_high_frequency, HighPassSpec};
use crate::image::RgbImage;
use crate::nn::{activation_backward, apply_activation, sigmoid, upsample2x, upsample2x_backward, Activation, Conv2d};
use crate::tensor::{Grid, Mat, Plane};

/// Probability clamp used inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Threshold used to binarize predicted masks for display.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    /// Square input side `H = W`.
    pub image_size: usize,
    pub stem: Vec<StemLayerSpec>,
    /// Token width `C`; must equal the last stem layer's channels.
    pub channels: usize,
    /// Number of object prototypes `N`.
    pub prototypes: usize,
    pub heads: usize,
    /// Encoder/decoder pairs `I`.
    pub depth: usize,
    /// Similarity window `k`.
    pub window: usize,
    /// High-pass cutoff `α`.
    pub alpha: f64,
    /// Constant gain on the high-frequency image before the frequency stem.
    /// Sensor-level residuals are a few hundredths in amplitude, where GELU is
    /// nearly linear; the gain lets the stem respond to local residual energy.
    pub freq_gain: f64,
    pub ff_width: usize,
    pub head_channels: usize,
    /// Segmentation loss weight `λ`.
    pub lambda: f64,
    /// Parameter initialization seed.
    pub seed: u64,
    pub use_hfe: bool,
    pub use_bcim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            stem: vec![
                StemLayerSpec::new(3, 16, 2, Activation::Gelu),
                StemLayerSpec::new(3, 32, 2, Activation::Gelu),
                StemLayerSpec::new(3, 48, 2, Activation::Gelu),
                StemLayerSpec::new(3, 64, 2, Activation::Identity),
            ],
            channels: 64,
            prototypes: 16,
            heads: 4,
            depth: 8,
            window: 3,
            alpha: 0.1,
            freq_gain: 50.0,
            ff_width: 256,
            head_channels: 32,
            lambda: 1.0,
            seed: 0,
            use_hfe: true,
            use_bcim: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used throughout the tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            stem: vec![StemLayerSpec::new(3, 8, 2, Activation::Gelu), StemLayerSpec::new(3, 8, 2, Activation::Identity)],
            channels: 8,
            prototypes: 2,
            heads: 1,
            depth: 1,
            window: 3,
            ff_width: 16,
            head_channels: 8,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        self.stem.iter().map(|s| s.stride).product()
    }

    /// `(H_s, W_s)`
    pub fn grid_size(&self) -> (usize, usize) {
        let s = self.image_size / self.stride();
        (s, s)
    }

    /// Tokens per modality `L`.
    pub fn tokens_per_modality(&self) -> usize {
        let (h, w) = self.grid_size();
        h * w
    }

    /// `log₂(H / H_s)`
    pub fn upsample_stages(&self) -> usize {
        self.stride().trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem.is_empty() {
            return Err(param_err!("stem must have at least one layer"));
        }
        if self.stem.iter().any(|s| s.stride == 0 || s.kernel % 2 == 0 || s.channels == 0) {
            return Err(param_err!("stem layers need odd kernels, positive strides and channels"));
        }
        let stride = self.stride();
        if !stride.is_power_of_two() {
            return Err(param_err!("total stem stride {stride} is not a power of two"));
        }
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(param_err!("image size {} not divisible by stride {stride}", self.image_size));
        }
        if self.stem.last().map(|s| s.channels) != Some(self.channels) {
            return Err(param_err!("last stem layer must output {} channels", self.channels));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(param_err!("token width {} must be even", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(param_err!("{} heads do not divide width {}", self.heads, self.channels));
        }
        if self.prototypes == 0 || self.depth == 0 || self.ff_width == 0 || self.head_channels == 0 {
            return Err(param_err!("prototypes, depth, ff_width and head_channels must be positive"));
        }
        if self.window % 2 == 0 {
            return Err(param_err!("window {} must be odd", self.window));
        }
        HighPassSpec::new(self.alpha)?;
        if !(self.freq_gain > 0.0 && self.freq_gain.is_finite()) {
            return Err(param_err!("freq_gain {} must be finite and positive", self.freq_gain));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(param_err!("lambda {} must be finite and non-negative", self.lambda));
        }
        Ok(())
    }

    fn geometry(&self) -> DecoderGeometry {
        let (height, width) = self.grid_size();
        DecoderGeometry { height, width, window: self.window, heads: self.heads, use_bcim: self.use_bcim }
    }
}

/// Every learnable tensor of the detector. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModelWeights {
    pub rgb_stem: Stem,
    pub freq_stem: Stem,
    /// Stand-in frequency token (width `C`) used when frequency extraction is disabled.
    pub freq_constant: Vec<f64>,
    pub prototypes: Mat,
    pub encoders: Vec<EncoderLayerParams>,
    pub decoders: Vec<DecoderLayerParams>,
    pub cls_weight: Vec<f64>,
    pub cls_bias: Vec<f64>,
    pub loc_stages: Vec<Conv2d>,
    pub loc_out: Conv2d,
}

fn fill_normal(values: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    values.iter_mut().for_each(|v| *v = dist.sample(rng));
}

impl ModelWeights {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut loc_stages = Vec::new();
        let mut cin = 2 * c;
        for _ in 0..config.upsample_stages() {
            loc_stages.push(Conv2d::zeros(3, 1, cin, config.head_channels));
            cin = config.head_channels;
        }
        Ok(Self {
            rgb_stem: Stem::zeros(&config.stem, 3)?,
            freq_stem: Stem::zeros(&config.stem, 1)?,
            freq_constant: vec![0.0; c],
            prototypes: Mat::zeros(config.prototypes, c),
            encoders: (0..config.depth).map(|_| EncoderLayerParams::zeros(c, config.prototypes, config.ff_width)).collect(),
            decoders: (0..config.depth).map(|_| DecoderLayerParams::zeros(c, config.ff_width)).collect(),
            cls_weight: vec![0.0; 2 * c],
            cls_bias: vec![0.0],
            loc_stages,
            loc_out: Conv2d::zeros(3, 1, cin, 1),
        })
    }

    /// Seeded random initialization: He-normal convolutions, `1/√fan_in`
    /// projections, prototypes `N(0, 0.02²)`, zero biases and shifts.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for conv in w.rgb_stem.layers.iter_mut().chain(w.freq_stem.layers.iter_mut()).chain(w.loc_stages.iter_mut()) {
            let fan_in = (conv.kernel * conv.kernel * conv.in_channels) as f64;
            fill_normal(&mut conv.weight, (2.0 / fan_in).sqrt(), &mut rng);
        }
        let fan_in = (w.loc_out.kernel * w.loc_out.kernel * w.loc_out.in_channels) as f64;
        fill_normal(&mut w.loc_out.weight, (1.0 / fan_in).sqrt(), &mut rng);
        fill_normal(&mut w.prototypes.data, 0.02, &mut rng);
        for enc in &mut w.encoders {
            for m in [&mut enc.w_q, &mut enc.w_k, &mut enc.w_v, &mut enc.w_ff1, &mut enc.w_ff2] {
                let std = (1.0 / m.rows as f64).sqrt();
                fill_normal(&mut m.data, std, &mut rng);
            }
            fill_normal(&mut enc.w_c.data, 0.02, &mut rng);
        }
        for dec in &mut w.decoders {
            for m in [&mut dec.w_q, &mut dec.w_k, &mut dec.w_v, &mut dec.w_mlp1, &mut dec.w_mlp2] {
                let std = (1.0 / m.rows as f64).sqrt();
                fill_normal(&mut m.data, std, &mut rng);
            }
        }
        let std = (1.0 / w.cls_weight.len() as f64).sqrt();
        fill_normal(&mut w.cls_weight, std, &mut rng);
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rgb_stem: self.rgb_stem.zeros_like(),
            freq_stem: self.freq_stem.zeros_like(),
            freq_constant: vec![0.0; self.freq_constant.len()],
            prototypes: Mat::zeros(self.prototypes.rows, self.prototypes.cols),
            encoders: self.encoders.iter().map(EncoderLayerParams::zeros_like).collect(),
            decoders: self.decoders.iter().map(DecoderLayerParams::zeros_like).collect(),
            cls_weight: vec![0.0; self.cls_weight.len()],
            cls_bias: vec![0.0; self.cls_bias.len()],
            loc_stages: self.loc_stages.iter().map(Conv2d::zeros_like).collect(),
            loc_out: self.loc_out.zeros_like(),
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (prefix, stem) in [("rgb_stem", &self.rgb_stem), ("freq_stem", &self.freq_stem)] {
            for (i, l) in stem.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out.push(("freq_constant".to_string(), &self.freq_constant));
        out.push(("prototypes".to_string(), &self.prototypes.data));
        for (i, e) in self.encoders.iter().enumerate() {
            out.push((format!("encoder.{i}.norm_objects.gamma"), &e.norm_objects.gamma));
            out.push((format!("encoder.{i}.norm_objects.beta"), &e.norm_objects.beta));
            out.push((format!("encoder.{i}.norm_patches.gamma"), &e.norm_patches.gamma));
            out.push((format!("encoder.{i}.norm_patches.beta"), &e.norm_patches.beta));
            out.push((format!("encoder.{i}.w_q"), &e.w_q.data));
            out.push((format!("encoder.{i}.w_k"), &e.w_k.data));
            out.push((format!("encoder.{i}.w_v"), &e.w_v.data));
            out.push((format!("encoder.{i}.w_c"), &e.w_c.data));
            out.push((format!("encoder.{i}.w_ff1"), &e.w_ff1.data));
            out.push((format!("encoder.{i}.w_ff2"), &e.w_ff2.data));
        }
        for (i, d) in self.decoders.iter().enumerate() {
            out.push((format!("decoder.{i}.norm_patches.gamma"), &d.norm_patches.gamma));
            out.push((format!("decoder.{i}.norm_patches.beta"), &d.norm_patches.beta));
            out.push((format!("decoder.{i}.norm_objects.gamma"), &d.norm_objects.gamma));
            out.push((format!("decoder.{i}.norm_objects.beta"), &d.norm_objects.beta));
            out.push((format!("decoder.{i}.w_q"), &d.w_q.data));
            out.push((format!("decoder.{i}.w_k"), &d.w_k.data));
            out.push((format!("decoder.{i}.w_v"), &d.w_v.data));
            out.push((format!("decoder.{i}.w_mlp1"), &d.w_mlp1.data));
            out.push((format!("decoder.{i}.w_mlp2"), &d.w_mlp2.data));
        }
        out.push(("cls_head.weight".to_string(), &self.cls_weight));
        out.push(("cls_head.bias".to_string(), &self.cls_bias));
        for (i, l) in self.loc_stages.iter().enumerate() {
            out.push((format!("loc_head.{i}.weight"), &l.weight));
            out.push((format!("loc_head.{i}.bias"), &l.bias));
        }
        out.push(("loc_head.out.weight".to_string(), &self.loc_out.weight));
        out.push(("loc_head.out.bias".to_string(), &self.loc_out.bias));
        out
    }

    /// Mutable counterpart of [`ModelWeights::tensors`], same names and order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (prefix, stem) in [("rgb_stem", &mut self.rgb_stem), ("freq_stem", &mut self.freq_stem)] {
            for (i, l) in stem.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
            }
        }
        out.push(("freq_constant".to_string(), &mut self.freq_constant));
        out.push(("prototypes".to_string(), &mut self.prototypes.data));
        for (i, e) in self.encoders.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.norm_objects.gamma"), &mut e.norm_objects.gamma));
            out.push((format!("encoder.{i}.norm_objects.beta"), &mut e.norm_objects.beta));
            out.push((format!("encoder.{i}.norm_patches.gamma"), &mut e.norm_patches.gamma));
            out.push((format!("encoder.{i}.norm_patches.beta"), &mut e.norm_patches.beta));
            out.push((format!("encoder.{i}.w_q"), &mut e.w_q.data));
            out.push((format!("encoder.{i}.w_k"), &mut e.w_k.data));
            out.push((format!("encoder.{i}.w_v"), &mut e.w_v.data));
            out.push((format!("encoder.{i}.w_c"), &mut e.w_c.data));
            out.push((format!("encoder.{i}.w_ff1"), &mut e.w_ff1.data));
            out.push((format!("encoder.{i}.w_ff2"), &mut e.w_ff2.data));
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            out.push((format!("decoder.{i}.norm_patches.gamma"), &mut d.norm_patches.gamma));
            out.push((format!("decoder.{i}.norm_patches.beta"), &mut d.norm_patches.beta));
            out.push((format!("decoder.{i}.norm_objects.gamma"), &mut d.norm_objects.gamma));
            out.push((format!("decoder.{i}.norm_objects.beta"), &mut d.norm_objects.beta));
            out.push((format!("decoder.{i}.w_q"), &mut d.w_q.data));
            out.push((format!("decoder.{i}.w_k"), &mut d.w_k.data));
            out.push((format!("decoder.{i}.w_v"), &mut d.w_v.data));
            out.push((format!("decoder.{i}.w_mlp1"), &mut d.w_mlp1.data));
            out.push((format!("decoder.{i}.w_mlp2"), &mut d.w_mlp2.data));
        }
        out.push(("cls_head.weight".to_string(), &mut self.cls_weight));
        out.push(("cls_head.bias".to_string(), &mut self.cls_bias));
        for (i, l) in self.loc_stages.iter_mut().enumerate() {
            out.push((format!("loc_head.{i}.weight"), &mut l.weight));
            out.push((format!("loc_head.{i}.bias"), &mut l.bias));
        }
        out.push(("loc_head.out.weight".to_string(), &mut self.loc_out.weight));
        out.push(("loc_head.out.bias".to_string(), &mut self.loc_out.bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks that every tensor matches the shapes `config` implies.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(config)?;
        let ours = self.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() {
            return Err(shape_err!("weights have {} tensors, config implies {}", ours.len(), theirs.len()));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.len() != b.len() {
                return Err(shape_err!("{name}: {} values, config implies {}", a.len(), b.len()));
            }
        }
        Ok(())
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelWeights, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Detector output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    /// Tamper probability `ŷ`.
    pub label_score: f64,
    /// Per-pixel tamper probability `M̂`, `H × W`.
    pub mask: Plane,
    /// Encoder affinities, one per layer.
    pub affinities: Vec<AffinityMatrix>,
}

impl PredictionOutput {
    pub fn binary_mask(&self) -> Plane {
        binarize(&self.mask, MASK_THRESHOLD)
    }
}

/// `1` where `value > threshold`.
pub fn binarize(mask: &Plane, threshold: f64) -> Plane {
    Plane { height: mask.height, width: mask.width, data: mask.data.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect() }
}

/// Intermediate values retained for backpropagation.
pub struct ForwardTrace {
    rgb: StemCache,
    freq: Option<StemCache>,
    encoders: Vec<EncoderCache>,
    decoders: Vec<DecoderCache>,
    g_out: Grid,
    pooled: Vec<f64>,
    loc_inputs: Vec<Grid>,
    loc_pre: Vec<Grid>,
    loc_out_input: Grid,
}

fn ensure_finite(ok: bool, stage: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite(stage.to_string()))
    }
}

pub fn forward(image: &RgbImage, weights: &ModelWeights, config: &ModelConfig) -> Result<PredictionOutput> {
    Ok(forward_traced(image, weights, config)?.0)
}

pub fn forward_traced(image: &RgbImage, weights: &ModelWeights, config: &ModelConfig) -> Result<(PredictionOutput, ForwardTrace)> {
    config.validate()?;
    if image.height() != config.image_size || image.width() != config.image_size {
        return Err(shape_err!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            config.image_size,
            config.image_size
        ));
    }
    let (hs, ws) = config.grid_size();
    let (gr, rgb_cache) = weights.rgb_stem.forward(&image.to_grid())?;
    ensure_finite(gr.values.is_finite(), "rgb stem")?;
    if gr.values.shape() != (hs, ws, config.channels) {
        return Err(shape_err!("rgb stem produced {:?}", gr.values.shape()));
    }
    let rgb_tokens = patchify(&gr.values);

    let (freq_tokens, freq_cache) = if config.use_hfe {
        let xh = extract_high_frequency(image, HighPassSpec::new(config.alpha)?)?;
        ensure_finite(xh.is_finite(), "high-frequency extraction")?;
        let mut xh = xh.into_grid();
        xh.data.iter_mut().for_each(|v| *v *= config.freq_gain);
        let (gf, cache) = weights.freq_stem.forward(&xh)?;
        ensure_finite(gf.values.is_finite(), "frequency stem")?;
        (patchify(&gf.values), Some(cache))
    } else {
        (Mat::from_fn(hs * ws, config.channels, |_, c| weights.freq_constant[c]), None)
    };
    let mut patches = embed_tokens(&rgb_tokens, &freq_tokens)?.tokens;
    let mut objects = weights.prototypes.clone();

    let geom = config.geometry();
    let mut encoders = Vec::with_capacity(config.depth);
    let mut decoders = Vec::with_capacity(config.depth);
    let mut affinities = Vec::with_capacity(config.depth);
    for (i, (enc, dec)) in weights.encoders.iter().zip(&weights.decoders).enumerate() {
        let (o_next, enc_cache) =
            encoder_forward(&objects, &patches, enc, config.heads).map_err(|e| stage_error(e, format!("encoder {i}")))?;
        let (p_next, dec_cache) =
            decoder_forward(&patches, &o_next, dec, geom).map_err(|e| stage_error(e, format!("decoder {i}")))?;
        affinities.push(enc_cache.affinity.clone());
        encoders.push(enc_cache);
        decoders.push(dec_cache);
        objects = o_next;
        patches = p_next;
    }

    let g_out = sequence_to_grid(&patches, hs, ws)?;
    let cells = (hs * ws) as f64;
    let mut pooled = vec![0.0; g_out.channels];
    for cell in g_out.data.chunks_exact(g_out.channels) {
        for (p, v) in pooled.iter_mut().zip(cell) {
            *p += v / cells;
        }
    }
    let logit = crate::tensor::dot(&pooled, &weights.cls_weight) + weights.cls_bias[0];
    let label_score = sigmoid(logit);
    ensure_finite(label_score.is_finite(), "classification head")?;

    let mut x = g_out.clone();
    let mut loc_inputs = Vec::new();
    let mut loc_pre = Vec::new();
    for conv in &weights.loc_stages {
        let up = upsample2x(&x);
        let z = conv.forward(&up)?;
        x = apply_activation(&z, Activation::Gelu);
        loc_inputs.push(up);
        loc_pre.push(z);
    }
    let logits = weights.loc_out.forward(&x)?;
    let mask = Plane { height: logits.height, width: logits.width, data: logits.data.iter().map(|&z| sigmoid(z)).collect() };
    ensure_finite(mask.is_finite(), "localization head")?;
    if mask.shape() != (config.image_size, config.image_size) {
        return Err(shape_err!("localization head produced {:?}", mask.shape()));
    }

    let trace = ForwardTrace { rgb: rgb_cache, freq: freq_cache, encoders, decoders, g_out, pooled, loc_inputs, loc_pre, loc_out_input: x };
    Ok((PredictionOutput { label_score, mask, affinities }, trace))
}

fn stage_error(err: Error, stage: String) -> Error {
    match err {
        Error::NonFinite(inner) => Error::NonFinite(format!("{stage}: {inner}")),
        other => other,
    }
}

/// `sigmoid(FC(GAP(G_out)))`
pub fn classification_head(g_out: &Grid, weight: &[f64], bias: f64) -> Result<f64> {
    if weight.len() != g_out.channels {
        return Err(shape_err!("classifier expects {} channels, grid has {}", weight.len(), g_out.channels));
    }
    let cells = (g_out.height * g_out.width) as f64;
    let mut pooled = vec![0.0; g_out.channels];
    for cell in g_out.data.chunks_exact(g_out.channels) {
        for (p, v) in pooled.iter_mut().zip(cell) {
            *p += v / cells;
        }
    }
    Ok(sigmoid(crate::tensor::dot(&pooled, weight) + bias))
}

/// Progressive `(upsample 2× → conv → GELU)` stages then a 1-channel conv and sigmoid.
pub fn localization_head(g_out: &Grid, stages: &[Conv2d], out: &Conv2d) -> Result<Plane> {
    let mut x = g_out.clone();
    for conv in stages {
        x = apply_activation(&conv.forward(&upsample2x(&x))?, Activation::Gelu);
    }
    let logits = out.forward(&x)?;
    Ok(Plane { height: logits.height, width: logits.width, data: logits.data.iter().map(|&z| sigmoid(z)).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LossBreakdown {
    pub cls: f64,
    pub seg: f64,
    pub total: f64,
}

#[inline]
fn bce(target: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Gradient of the clamped BCE with respect to the pre-sigmoid logit.
#[inline]
fn bce_logit_grad(target: f64, p: f64) -> f64 {
    if p > BCE_EPS && p < 1.0 - BCE_EPS {
        p - target
    } else {
        0.0
    }
}

fn check_binary(v: f64, what: &str) -> Result<()> {
    if v == 0.0 || v == 1.0 {
        Ok(())
    } else {
        Err(param_err!("{what} value {v} is not 0 or 1"))
    }
}

/// `BCE(y, ŷ) + λ · mean_pixels BCE(M, M̂)`
pub fn loss(label: f64, score: f64, mask: &Plane, predicted: &Plane, lambda: f64) -> Result<LossBreakdown> {
    check_binary(label, "label")?;
    if mask.shape() != predicted.shape() {
        return Err(shape_err!("mask {:?} vs prediction {:?}", mask.shape(), predicted.shape()));
    }
    for &m in &mask.data {
        check_binary(m, "mask")?;
    }
    let cls = bce(label, score);
    let seg = mask.data.iter().zip(&predicted.data).map(|(&m, &p)| bce(m, p)).sum::<f64>() / mask.data.len() as f64;
    Ok(LossBreakdown { cls, seg, total: cls + lambda * seg })
}

/// Loss and exact gradients with respect to every weight for one sample.
pub fn gradients(
    image: &RgbImage,
    label: f64,
    mask: &Plane,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<(LossBreakdown, ModelWeights)> {
    let (pred, trace) = forward_traced(image, weights, config)?;
    let losses = loss(label, pred.label_score, mask, &pred.mask, config.lambda)?;
    let grad = backward(&pred, &trace, label, mask, weights, config)?;
    Ok((losses, grad))
}

fn backward(
    pred: &PredictionOutput,
    trace: &ForwardTrace,
    label: f64,
    mask: &Plane,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<ModelWeights> {
    let mut grad = weights.zeros_like();
    let (hs, ws) = config.grid_size();
    let g = &trace.g_out;

    // classification head
    let d_logit = bce_logit_grad(label, pred.label_score);
    for (gw, p) in grad.cls_weight.iter_mut().zip(&trace.pooled) {
        *gw += d_logit * p;
    }
    grad.cls_bias[0] += d_logit;
    let mut d_g = Grid::zeros(g.height, g.width, g.channels);
    let cells = (hs * ws) as f64;
    for cell in d_g.data.chunks_exact_mut(g.channels) {
        for (d, w) in cell.iter_mut().zip(&weights.cls_weight) {
            *d = d_logit * w / cells;
        }
    }

    // localization head
    let pixels = mask.data.len() as f64;
    let d_logits = Grid {
        height: mask.height,
        width: mask.width,
        channels: 1,
        data: mask.data.iter().zip(&pred.mask.data).map(|(&m, &p)| config.lambda * bce_logit_grad(m, p) / pixels).collect(),
    };
    let mut d_x = weights.loc_out.backward(&trace.loc_out_input, &d_logits, &mut grad.loc_out);
    for i in (0..weights.loc_stages.len()).rev() {
        let d_z = activation_backward(&trace.loc_pre[i], &d_x, Activation::Gelu);
        let d_up = weights.loc_stages[i].backward(&trace.loc_inputs[i], &d_z, &mut grad.loc_stages[i]);
        d_x = upsample2x_backward(&d_up);
    }
    for (a, b) in d_g.data.iter_mut().zip(&d_x.data) {
        *a += b;
    }

    // encoder/decoder stack
    let geom = config.geometry();
    let mut d_patches = grid_to_sequence(&d_g)?;
    let mut d_objects = Mat::zeros(weights.prototypes.rows, weights.prototypes.cols);
    for i in (0..config.depth).rev() {
        let (d_p_dec, d_o_dec) = decoder_backward(&weights.decoders[i], &trace.decoders[i], geom, &d_patches, &mut grad.decoders[i]);
        d_objects.add_assign(&d_o_dec);
        let (d_o_prev, d_p_enc) = encoder_backward(&weights.encoders[i], &trace.encoders[i], &d_objects, &mut grad.encoders[i]);
        d_patches = d_p_dec.add(&d_p_enc);
        d_objects = d_o_prev;
    }
    grad.prototypes.add_assign(&d_objects);

    // stems
    let (d_rgb, d_freq) = d_patches.split_rows(hs * ws);
    weights.rgb_stem.backward(&trace.rgb, &unpatchify(&d_rgb, hs, ws)?, &mut grad.rgb_stem);
    match &trace.freq {
        Some(cache) => {
            weights.freq_stem.backward(cache, &unpatchify(&d_freq, hs, ws)?, &mut grad.freq_stem);
        }
        None => {
            for r in 0..d_freq.rows {
                for (g, d) in grad.freq_constant.iter_mut().zip(d_freq.row(r)) {
                    *g += d;
                }
            }
        }
    }
    ensure_finite(grad.is_finite(), "gradients")?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::random_grid;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
        RgbImage::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    fn square_mask(size: usize) -> Plane {
        Plane::from_fn(size, size, |y, x| if (8..20).contains(&y) && (10..24).contains(&x) { 1.0 } else { 0.0 })
    }

    #[test]
    fn defaults_and_tiny() {
        let d = ModelConfig::default();
        assert_eq!((d.image_size, d.prototypes, d.depth, d.lambda), (256, 16, 8, 1.0));
        assert_eq!(d.grid_size(), (16, 16));
        assert_eq!(d.upsample_stages(), 4);
        d.validate().unwrap();
        let t = ModelConfig::tiny();
        assert_eq!((t.image_size, t.stride(), t.channels, t.prototypes, t.heads, t.depth, t.window), (32, 4, 8, 2, 1, 1, 3));
        t.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = ModelConfig::tiny();
        c.stem[0].stride = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.channels = 6;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shapes_ranges_and_determinism() {
        let config = ModelConfig::tiny();
        let w = ModelWeights::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 32);
        let a = forward(&img, &w, &config).unwrap();
        let b = forward(&img, &w, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask.shape(), (32, 32));
        assert!((0.0..=1.0).contains(&a.label_score));
        assert!(a.mask.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.affinities.len(), 1);
        assert_eq!(a.affinities[0].heads[0].shape(), (2, 2 * 64));
        assert!(forward(&random_image(&mut rng, 16), &w, &config).is_err());
        assert_eq!(ModelWeights::init(&config).unwrap(), w);
    }

    #[test]
    fn ablations_keep_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = random_image(&mut rng, 32);
        for (hfe, bcim) in [(false, true), (true, false), (false, false)] {
            let config = ModelConfig { use_hfe: hfe, use_bcim: bcim, ..ModelConfig::tiny() };
            let w = ModelWeights::init(&config).unwrap();
            let out = forward(&img, &w, &config).unwrap();
            assert_eq!(out.mask.shape(), (32, 32));
            assert!((0.0..=1.0).contains(&out.label_score));
            assert!(out.mask.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn heads_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_grid(&mut rng, 4, 4, 6);
        assert_eq!(classification_head(&g, &[0.0; 6], 0.0).unwrap(), 0.5);
        let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
        let mut mean = [0.0; 6];
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..6 {
                    mean[c] += g.get(y, x, c) / 16.0;
                }
            }
        }
        let expected = sigmoid(mean.iter().zip(&w).map(|(m, w)| m * w).sum::<f64>() + 0.3);
        assert!((classification_head(&g, &w, 0.3).unwrap() - expected).abs() < 1e-14);
        let constant = Grid::from_fn_cells(3, 3, 6, |_, _| 0.25);
        let ones = [1.0; 6];
        assert!((classification_head(&constant, &ones, 0.0).unwrap() - sigmoid(6.0 * 0.25)).abs() < 1e-14);

        let config = ModelConfig { image_size: 256, ..ModelConfig::default() };
        let weights = ModelWeights::init(&config).unwrap();
        assert_eq!(weights.loc_stages.len(), 4);
        let mask = localization_head(&random_grid(&mut rng, 16, 16, 128), &weights.loc_stages, &weights.loc_out).unwrap();
        assert_eq!(mask.shape(), (256, 256));
        assert!(mask.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loss_cases() {
        let mask = Plane::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let perfect = loss(1.0, 1.0, &mask, &mask, 1.0).unwrap();
        assert!(perfect.total <= 2.0 * BCE_EPS * 2.0 + 1e-15);
        let half = Plane::filled(1, 2, 0.5);
        let l = loss(0.0, 0.5, &mask, &half, 2.0).unwrap();
        assert!((l.total - 3.0 * 2f64.ln()).abs() < 1e-12);
        let one = Plane::filled(1, 1, 1.0);
        let l = loss(1.0, 0.9, &one, &Plane::filled(1, 1, 0.8), 1.0).unwrap();
        assert!((l.total - (-(0.9f64.ln()) - 0.8f64.ln())).abs() < 1e-12);
        assert!((l.total - 0.3285).abs() < 5e-5);
        assert!(loss(0.5, 0.5, &mask, &half, 1.0).is_err());
        assert!(loss(1.0, 0.5, &Plane::filled(1, 2, 0.3), &half, 1.0).is_err());
    }

    #[test]
    fn zero_lambda_disconnects_localization_head() {
        let config = ModelConfig { lambda: 0.0, ..ModelConfig::tiny() };
        let w = ModelWeights::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (_, grad) = gradients(&random_image(&mut rng, 32), 1.0, &square_mask(32), &w, &config).unwrap();
        for (name, t) in grad.tensors() {
            if name.starts_with("loc_head") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(grad.cls_weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn untouched_parameters_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = random_image(&mut rng, 32);
        let config = ModelConfig::tiny();
        let w = ModelWeights::init(&config).unwrap();
        let (_, grad) = gradients(&img, 0.0, &square_mask(32), &w, &config).unwrap();
        assert!(grad.freq_constant.iter().all(|&v| v == 0.0));

        let config = ModelConfig { use_hfe: false, ..ModelConfig::tiny() };
        let (_, grad) = gradients(&img, 0.0, &square_mask(32), &w, &config).unwrap();
        for (name, t) in grad.tensors() {
            if name.starts_with("freq_stem") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(grad.freq_constant.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tensor_names_are_unique_and_aligned() {
        let config = ModelConfig { depth: 2, ..ModelConfig::tiny() };
        let mut w = ModelWeights::init(&config).unwrap();
        let names: Vec<String> = w.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let mut_names: Vec<String> = w.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
        w.check_against(&config).unwrap();
        assert!(w.check_against(&ModelConfig::tiny()).is_err());
    }

    #[test]
    fn nan_is_attributed_to_a_stage() {
        let config = ModelConfig::tiny();
        let mut w = ModelWeights::init(&config).unwrap();
        w.encoders[0].w_ff2.data[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        match forward(&random_image(&mut rng, 32), &w, &config) {
            Err(Error::NonFinite(stage)) => assert!(stage.contains("encoder 0"), "{stage}"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }
}
