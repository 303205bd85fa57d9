//! Writes a synthetic tampering corpus to disk: `images/`, `masks/` and the
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use objectformer_core::distort::resize_image;
use objectformer_core::synth::{generate_sample, SynthConfig, TamperKind};
use objectformer_core::RgbImage;
use rayon::prelude::*;

use crate::error::{RunError, RunResult};
use crate::io::{self, ImageJpeg};
use crate::manifest::{write_manifest, ManifestRecord, MANIFEST_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    /// Samples per kind, in [`TamperKind::ALL`] order.
    pub counts: [usize; 4],
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Loads every PNG/JPEG in `dir` (sorted by name), resized to `size`×`size`.
/// Unreadable files are skipped with a warning.
pub fn load_sources(dir: &Path, size: usize) -> RunResult<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| RunError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    paths.sort();
    let mut sources = Vec::with_capacity(paths.len());
    for path in paths {
        match io::read_rgb(&path) {
            Ok(img) => sources.push(resize_image(&img, size, size)?),
            Err(e) => warn!("skipping source {e}"),
        }
    }
    if sources.is_empty() {
        return Err(RunError::Usage(format!("no readable source images in {}", dir.display())));
    }
    Ok(sources)
}

/// Generates `config.count` samples into `root`. Output bytes depend only on
/// the config, the seed and the source images.
pub fn generate_dataset(config: &SynthConfig, seed: u64, root: &Path, source_dir: Option<&Path>) -> RunResult<SynthSummary> {
    config.validate().map_err(|e| RunError::Usage(e.to_string()))?;
    let sources = match source_dir {
        Some(dir) => load_sources(dir, config.image_size)?,
        None => Vec::new(),
    };
    let schedule = config.kind_schedule(seed)?;
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| RunError::io(&dir, e))?;
    }
    let records = schedule
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| {
            let sample = generate_sample(config, kind, &sources, seed, i, &ImageJpeg)?;
            let image_path = format!("images/{i:05}.png");
            let mask_path = format!("masks/{i:05}.png");
            io::write_rgb_png(&root.join(&image_path), &sample.image)?;
            io::write_mask_png(&root.join(&mask_path), &sample.mask)?;
            Ok(ManifestRecord { image_path, mask_path, label: sample.label, kind, degradations: sample.degradations, seed: sample.seed })
        })
        .collect::<RunResult<Vec<_>>>()?;
    let manifest = root.join(MANIFEST_FILE);
    write_manifest(&manifest, &records)?;
    let mut counts = [0; 4];
    for r in &records {
        counts[TamperKind::ALL.iter().position(|&k| k == r.kind).expect("known kind")] += 1;
    }
    info!("wrote {} samples to {}", records.len(), root.display());
    Ok(SynthSummary { manifest, counts })
}
