//! Image files: 8-bit RGB PNG/JPEG in, PNG out, binary masks as {0, 255}
//! grayscale PNG, and a JPEG round-trip codec.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{GrayImage, ImageFormat, RgbImage as Rgb8};
use objectformer_core::synth::JpegCodec;
use objectformer_core::{Plane, RgbImage};

use crate::error::{RunError, RunResult};

/// `[0, 1] → {0..255}`, rounding to nearest.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_rgb8(img: &Rgb8) -> objectformer_core::Result<RgbImage> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

fn to_rgb8(image: &RgbImage) -> Rgb8 {
    let raw = image.data().iter().map(|&v| quantize(v)).collect();
    Rgb8::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer matches dimensions")
}

fn ensure_parent(path: &Path) -> RunResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e)),
        _ => Ok(()),
    }
}

fn image_error(path: &Path, err: image::ImageError) -> RunError {
    match err {
        image::ImageError::IoError(e) => RunError::io(path, e),
        other => RunError::format(path, other),
    }
}

/// Reads any PNG or JPEG as RGB in `[0, 1]`.
pub fn read_rgb(path: &Path) -> RunResult<RgbImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    Ok(from_rgb8(&img)?)
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> RunResult<()> {
    ensure_parent(path)?;
    to_rgb8(image).save_with_format(path, ImageFormat::Png).map_err(|e| image_error(path, e))
}

/// Reads a mask PNG; values above 127 count as manipulated.
pub fn read_mask(path: &Path) -> RunResult<Plane> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| if v > 127 { 1.0 } else { 0.0 }).collect();
    Ok(Plane::from_vec(h as usize, w as usize, data)?)
}

/// Writes a binary mask as {0, 255}.
pub fn write_mask_png(path: &Path, mask: &Plane) -> RunResult<()> {
    write_gray_png(path, &Plane { data: mask.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(), ..mask.clone() })
}

/// Writes a `[0, 1]` plane as 8-bit grayscale.
pub fn write_gray_png(path: &Path, plane: &Plane) -> RunResult<()> {
    ensure_parent(path)?;
    let raw = plane.data.iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(plane.width as u32, plane.height as u32, raw).expect("buffer matches dimensions");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_error(path, e))
}

/// Baseline JPEG encode/decode through the `image` crate.
pub struct ImageJpeg;

impl JpegCodec for ImageJpeg {
    fn roundtrip(&self, image: &RgbImage, quality: u8) -> objectformer_core::Result<RgbImage> {
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality)
            .encode_image(&to_rgb8(image))
            .map_err(|e| objectformer_core::Error::InvalidParameter(format!("jpeg encode: {e}")))?;
        let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)
            .map_err(|e| objectformer_core::Error::InvalidParameter(format!("jpeg decode: {e}")))?
            .to_rgb8();
        from_rgb8(&decoded)
    }
}
