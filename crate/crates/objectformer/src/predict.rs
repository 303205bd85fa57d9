//! Single-image prediction: soft and binary mask PNGs at the input size.

use std::path::{Path, PathBuf};

use objectformer_core::distort::{resize_bilinear, resize_image};
use objectformer_core::model::{forward, ModelConfig, ModelWeights};
use objectformer_core::Plane;

use crate::error::RunResult;
use crate::io::{self, quantize};

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutcome {
    pub label_score: f64,
    pub soft_mask: PathBuf,
    pub binary_mask: PathBuf,
}

/// 8-bit value at or above which a soft-mask pixel counts as manipulated.
/// `quantize(v) > 127` exactly when `v ≥ 0.5`, so thresholding the PNG and
/// thresholding the scores agree except at a score of exactly 0.5.
const BINARY_LEVEL: u8 = 128;

/// Binary mask derived from the quantized soft mask, so the two files agree pixelwise.
pub fn binary_from_soft(soft: &Plane) -> Plane {
    Plane { data: soft.data.iter().map(|&v| if quantize(v) >= BINARY_LEVEL { 1.0 } else { 0.0 }).collect(), ..soft.clone() }
}

/// Runs the model on `image_path` and writes `<stem>_mask.png` and
/// `<stem>_mask_binary.png` into `out`.
pub fn predict_file(image_path: &Path, weights: &ModelWeights, config: &ModelConfig, out: &Path) -> RunResult<PredictOutcome> {
    let image = io::read_rgb(image_path)?;
    let (h, w) = (image.height(), image.width());
    let input = resize_image(&image, config.image_size, config.image_size)?;
    let prediction = forward(&input, weights, config)?;
    let soft = resize_bilinear(&prediction.mask, h, w);
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let soft_mask = out.join(format!("{stem}_mask.png"));
    let binary_mask = out.join(format!("{stem}_mask_binary.png"));
    io::write_gray_png(&soft_mask, &soft)?;
    io::write_mask_png(&binary_mask, &binary_from_soft(&soft))?;
    Ok(PredictOutcome { label_score: prediction.label_score, soft_mask, binary_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use objectformer_core::RgbImage;

    #[test]
    fn outputs_match_input_size_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig::tiny();
        let weights = ModelWeights::init(&config).unwrap();
        let path = dir.path().join("photo.png");
        io::write_rgb_png(&path, &RgbImage::from_fn(45, 61, |y, x| [y as f64 / 45.0, x as f64 / 61.0, 0.4]).unwrap()).unwrap();
        let a = predict_file(&path, &weights, &config, &dir.path().join("a")).unwrap();
        let b = predict_file(&path, &weights, &config, &dir.path().join("b")).unwrap();
        assert!((0.0..=1.0).contains(&a.label_score));
        let soft = image::open(&a.soft_mask).unwrap().to_luma8();
        let binary = image::open(&a.binary_mask).unwrap().to_luma8();
        assert_eq!(soft.dimensions(), (61, 45));
        assert_eq!(binary.dimensions(), (61, 45));
        for (s, b) in soft.as_raw().iter().zip(binary.as_raw()) {
            assert_eq!(*b, if *s >= BINARY_LEVEL { 255 } else { 0 });
        }
        assert_eq!(std::fs::read(&a.soft_mask).unwrap(), std::fs::read(&b.soft_mask).unwrap());
        assert_eq!(std::fs::read(&a.binary_mask).unwrap(), std::fs::read(&b.binary_mask).unwrap());
    }

    #[test]
    fn quantized_threshold_agrees_with_scores() {
        let soft = Plane::from_vec(1, 5, vec![0.0, 0.499, 0.5001, 0.9, 1.0]).unwrap();
        assert_eq!(binary_from_soft(&soft).data, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
