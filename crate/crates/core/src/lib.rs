#![no_std]
#![doc = "Numerical core of the ObjectFormer manipulation detector."]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod decoder;
pub mod distort;
pub mod encoder;
pub mod error;
pub mod frequency;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{HighFreqImage, RgbImage};
pub use tensor::{Grid, Mat, Plane};
