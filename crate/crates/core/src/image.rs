//! Image containers with values in `[0, 1]`.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{Grid, Plane};

/// `height × width × 3` RGB image, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Single-channel high-frequency companion of an [`RgbImage`].
pub type HighFreqImage = Plane;

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("empty image {height}x{width}"));
        }
        if data.len() != height * width * 3 {
            return Err(shape_err!("{} values for a {height}x{width}x3 image", data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param_err!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// One colour channel as a plane.
    pub fn channel(&self, c: usize) -> Plane {
        assert!(c < 3);
        Plane { height: self.height, width: self.width, data: self.data.iter().skip(c).step_by(3).copied().collect() }
    }

    /// Reassembles an image from three channel planes, clamping into `[0, 1]`.
    pub fn from_channels(channels: [&Plane; 3]) -> Result<Self> {
        let (h, w) = channels[0].shape();
        if channels.iter().any(|p| p.shape() != (h, w)) {
            return Err(shape_err!("channel planes differ in shape"));
        }
        let data = (0..h * w).flat_map(|i| channels.map(|p| p.data[i])).collect();
        Self::from_clamped(h, w, data)
    }

    pub fn to_grid(&self) -> Grid {
        Grid { height: self.height, width: self.width, channels: 3, data: self.data.clone() }
    }
}

impl TryFrom<Grid> for RgbImage {
    type Error = Error;

    fn try_from(grid: Grid) -> Result<Self> {
        if grid.channels != 3 {
            return Err(shape_err!("expected 3 channels, got {}", grid.channels));
        }
        Self::new(grid.height, grid.width, grid.data)
    }
}
