//! Convolutional stems for the RGB and frequency branches, and assembly of the
//! positional-encoded multimodal token sequence.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::image::{HighFreqImage, RgbImage};
use crate::nn::{activation_backward, apply_activation, Activation, Conv2d};
use crate::tensor::{Grid, Mat};

/// One convolution of a stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StemLayerSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl StemLayerSpec {
    pub const fn new(kernel: usize, channels: usize, stride: usize, activation: Activation) -> Self {
        Self { kernel, channels, stride, activation }
    }
}

/// Learnable convolution stack.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Stem {
    pub layers: Vec<Conv2d>,
    pub activations: Vec<Activation>,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StemCache {
    inputs: Vec<Grid>,
    pre_activations: Vec<Grid>,
}

/// Downsampled feature map with its total stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub values: Grid,
    pub stride: usize,
}

impl Stem {
    /// Zero-initialized stem for `in_channels` input channels.
    pub fn zeros(specs: &[StemLayerSpec], in_channels: usize) -> Result<Self> {
        if specs.is_empty() {
            return Err(param_err!("stem needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut cin = in_channels;
        for s in specs {
            let conv = Conv2d::zeros(s.kernel, s.stride, cin, s.channels);
            conv.validate()?;
            layers.push(conv);
            cin = s.channels;
        }
        Ok(Self { layers, activations: specs.iter().map(|s| s.activation).collect() })
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Conv2d::zeros_like).collect(), activations: self.activations.clone() }
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn forward(&self, input: &Grid) -> Result<(FeatureGrid, StemCache)> {
        if self.layers.len() != self.activations.len() {
            return Err(shape_err!("stem has {} layers but {} activations", self.layers.len(), self.activations.len()));
        }
        let mut cache = StemCache { inputs: Vec::new(), pre_activations: Vec::new() };
        let mut x = input.clone();
        for (conv, &act) in self.layers.iter().zip(&self.activations) {
            let z = conv.forward(&x)?;
            let a = apply_activation(&z, act);
            cache.inputs.push(x);
            cache.pre_activations.push(z);
            x = a;
        }
        Ok((FeatureGrid { values: x, stride: self.stride() }, cache))
    }

    pub fn backward(&self, cache: &StemCache, dout: &Grid, grad: &mut Stem) -> Grid {
        let mut g = dout.clone();
        for i in (0..self.layers.len()).rev() {
            let dz = activation_backward(&cache.pre_activations[i], &g, self.activations[i]);
            g = self.layers[i].backward(&cache.inputs[i], &dz, &mut grad.layers[i]);
        }
        g
    }
}

pub fn extract_rgb_features(image: &RgbImage, stem: &Stem) -> Result<FeatureGrid> {
    check_stem_input(stem, 3)?;
    Ok(stem.forward(&image.to_grid())?.0)
}

pub fn extract_freq_features(xh: &HighFreqImage, stem: &Stem) -> Result<FeatureGrid> {
    check_stem_input(stem, 1)?;
    Ok(stem.forward(&xh.clone().into_grid())?.0)
}

fn check_stem_input(stem: &Stem, channels: usize) -> Result<()> {
    match stem.layers.first() {
        Some(l) if l.in_channels == channels => Ok(()),
        Some(l) => Err(shape_err!("stem expects {} input channels, image has {channels}", l.in_channels)),
        None => Err(param_err!("empty stem")),
    }
}

/// Row-major flattening: token `r·W_s + c` is grid cell `(r, c)`.
pub fn patchify(grid: &Grid) -> Mat {
    grid.clone().into_mat()
}

pub fn unpatchify(tokens: &Mat, height: usize, width: usize) -> Result<Grid> {
    if tokens.rows != height * width {
        return Err(shape_err!("{} tokens cannot form a {height}x{width} grid", tokens.rows));
    }
    Grid::from_vec(height, width, tokens.cols, tokens.data.clone())
}

/// `pos[t, 2j] = sin(t / 10000^(2j/C))`, `pos[t, 2j+1] = cos(t / 10000^(2j/C))`.
pub fn sinusoidal_positions(length: usize, width: usize) -> Result<Mat> {
    if width == 0 || width % 2 != 0 {
        return Err(param_err!("positional width {width} must be even and positive"));
    }
    Ok(Mat::from_fn(length, width, |t, c| {
        let j = c / 2;
        let angle = t as f64 / 10000f64.powf(2.0 * j as f64 / width as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Multimodal token sequence: RGB tokens `[0, L)`, frequency tokens `[L, 2L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub tokens: Mat,
    pub length_per_modality: usize,
}

impl PatchSequence {
    pub fn width(&self) -> usize {
        self.tokens.cols
    }

    /// `(rgb, frequency)` halves.
    pub fn split(&self) -> (Mat, Mat) {
        self.tokens.split_rows(self.length_per_modality)
    }
}

pub fn build_multimodal_embedding(gr: &FeatureGrid, gf: &FeatureGrid) -> Result<PatchSequence> {
    if gr.values.shape() != gf.values.shape() {
        return Err(shape_err!(
            "RGB features {:?} and frequency features {:?} differ",
            gr.values.shape(),
            gf.values.shape()
        ));
    }
    embed_tokens(&patchify(&gr.values), &patchify(&gf.values))
}

/// Concatenates two equally sized token matrices and adds positions.
pub fn embed_tokens(rgb: &Mat, freq: &Mat) -> Result<PatchSequence> {
    if rgb.shape() != freq.shape() {
        return Err(shape_err!("token halves {:?} and {:?} differ", rgb.shape(), freq.shape()));
    }
    let mut tokens = rgb.vstack(freq);
    tokens.add_assign(&sinusoidal_positions(tokens.rows, tokens.cols)?);
    if !tokens.is_finite() {
        return Err(Error::NonFinite("multimodal embedding".into()));
    }
    Ok(PatchSequence { tokens, length_per_modality: rgb.rows })
}
