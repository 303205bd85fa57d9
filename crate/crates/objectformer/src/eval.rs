//! Evaluation reports, the distortion robustness table and affinity-map export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use objectformer_core::distort::{apply_distortion, DistortionGrid};
use objectformer_core::metrics::{summarize, ImageScore, MetricReport, PixelAggregation};
use objectformer_core::model::{forward, ModelConfig, ModelWeights};
use objectformer_core::{Plane, RgbImage};
use rayon::prelude::*;

use crate::config::{derive_seed, RunConfig};
use crate::error::{RunError, RunResult};
use crate::io::{self, ImageJpeg};
use crate::manifest::{LoadedSample, Manifest};
use crate::train::{fit_to_model, write_atomic, Checkpoint};

pub const REPORT_FILE: &str = "eval_report.json";
pub const ROBUSTNESS_FILE: &str = "robustness.tsv";

/// Source of predictions: trained weights, or the ground truth itself.
#[derive(Clone, Debug)]
pub enum Predictor {
    Model { weights: ModelWeights, config: ModelConfig },
    /// Emits the sample's own label and mask; checks the harness end to end.
    Oracle,
}

impl Predictor {
    pub fn from_checkpoint(path: &Path) -> RunResult<Self> {
        let ck = Checkpoint::load(path)?;
        Ok(Predictor::Model { weights: ck.weights, config: ck.config.model })
    }

    /// The oracle when `eval.oracle` is set, otherwise the configured checkpoint.
    pub fn from_config(config: &RunConfig) -> RunResult<Self> {
        if config.eval.oracle {
            Ok(Predictor::Oracle)
        } else {
            Self::from_checkpoint(&config.checkpoint_path())
        }
    }

    /// Score and mask for a sample, at the resolution the predictor works in.
    pub fn score(&self, sample: LoadedSample) -> RunResult<ImageScore> {
        match self {
            Predictor::Oracle => Ok(ImageScore {
                label: sample.label == 1,
                score: f64::from(sample.label),
                predicted: sample.mask.clone(),
                mask: sample.mask,
            }),
            Predictor::Model { weights, config } => {
                let sample = fit_to_model(sample, config.image_size)?;
                let out = forward(&sample.image, weights, config)?;
                Ok(ImageScore { label: sample.label == 1, score: out.label_score, mask: sample.mask, predicted: out.mask })
            }
        }
    }
}

/// Loads what can be loaded; unreadable samples are logged and skipped.
pub fn load_readable(manifest: &Manifest) -> Vec<LoadedSample> {
    let loaded: Vec<RunResult<LoadedSample>> = (0..manifest.len()).into_par_iter().map(|i| manifest.load(i)).collect();
    let mut samples = Vec::with_capacity(loaded.len());
    let mut skipped = 0;
    for result in loaded {
        match result {
            Ok(s) => samples.push(s),
            Err(e) => {
                warn!("excluded from evaluation: {e}");
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        warn!("{skipped} of {} samples could not be loaded", manifest.len());
    }
    samples
}

pub fn evaluate(predictor: &Predictor, samples: &[LoadedSample], aggregation: PixelAggregation) -> RunResult<MetricReport> {
    let scores: Vec<ImageScore> = samples.par_iter().map(|s| predictor.score(s.clone())).collect::<RunResult<_>>()?;
    Ok(summarize(&scores, aggregation)?)
}

fn read_eval_samples(config: &RunConfig) -> RunResult<Vec<LoadedSample>> {
    let path = config.eval_manifest();
    let manifest = Manifest::read(&path)?;
    let samples = load_readable(&manifest);
    if samples.is_empty() {
        return Err(RunError::format(&path, "no readable samples to evaluate"));
    }
    Ok(samples)
}

pub fn report_json(report: &MetricReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize") + "\n"
}

/// Evaluates the configured predictor on the evaluation manifest and writes
/// the report to `<out>/eval_report.json`.
pub fn run_eval(config: &RunConfig) -> RunResult<(PathBuf, MetricReport)> {
    let predictor = Predictor::from_config(config)?;
    let samples = read_eval_samples(config)?;
    let report = evaluate(&predictor, &samples, config.eval.aggregation)?;
    config.write_effective(&config.out)?;
    let path = config.out.join(REPORT_FILE);
    write_atomic(&path, report_json(&report).as_bytes())?;
    info!("evaluated {} images", report.n_images);
    Ok((path, report))
}

/// One row of the robustness table.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub distortion: String,
    pub report: MetricReport,
}

/// Distorts every sample under each grid row and evaluates. Distortions run
/// at the sample's native size; the model path then resizes to its input.
pub fn robustness_suite(
    predictor: &Predictor,
    samples: &[LoadedSample],
    grid: &DistortionGrid,
    aggregation: PixelAggregation,
    seed: u64,
) -> RunResult<Vec<RobustnessRow>> {
    grid.rows
        .iter()
        .enumerate()
        .map(|(row, &d)| {
            let distorted: Vec<LoadedSample> = samples
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let noise_seed = derive_seed(seed, (row * samples.len() + i) as u64);
                    let (image, mask) = apply_distortion(&s.image, &s.mask, d, noise_seed, &ImageJpeg)?;
                    Ok(LoadedSample { image, mask, label: s.label })
                })
                .collect::<RunResult<_>>()?;
            Ok(RobustnessRow { distortion: d.label(), report: evaluate(predictor, &distorted, aggregation)? })
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Tab-separated table: a header line, then one line per distortion.
pub fn robustness_tsv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("distortion\tpixel_auc\timage_auc\tpixel_f1\timage_f1\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.distortion, cell(m.pixel_auc), cell(m.image_auc), cell(m.pixel_f1), cell(m.image_f1));
    }
    out
}

pub fn run_robustness(config: &RunConfig) -> RunResult<(PathBuf, Vec<RobustnessRow>)> {
    let predictor = Predictor::from_config(config)?;
    let samples = read_eval_samples(config)?;
    let rows = robustness_suite(&predictor, &samples, &DistortionGrid::default(), config.eval.aggregation, config.seed)?;
    config.write_effective(&config.out)?;
    let path = config.out.join(ROBUSTNESS_FILE);
    write_atomic(&path, robustness_tsv(&rows).as_bytes())?;
    Ok((path, rows))
}

/// Head-averaged first-layer affinity of each prototype over the RGB tokens,
/// as `H_s × W_s` planes min-max scaled to `[0, 1]` (constant rows map to 0).
pub fn affinity_maps(image: &RgbImage, weights: &ModelWeights, config: &ModelConfig) -> RunResult<Vec<Plane>> {
    let out = forward(image, weights, config)?;
    let first = out.affinities.first().ok_or_else(|| RunError::Usage("model has no encoder layers".into()))?;
    let mean = first.mean_over_heads();
    let (hs, ws) = config.grid_size();
    Ok((0..mean.rows)
        .map(|n| {
            let row = &mean.row(n)[..hs * ws];
            let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            let data = row.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
            Plane::from_vec(hs, ws, data).expect("row length matches grid")
        })
        .collect())
}

/// Writes one `affinity_NN.png` per prototype into `dir`.
pub fn export_affinity_maps(image: &RgbImage, weights: &ModelWeights, config: &ModelConfig, dir: &Path) -> RunResult<Vec<PathBuf>> {
    let resized = objectformer_core::distort::resize_image(image, config.image_size, config.image_size)?;
    affinity_maps(&resized, weights, config)?
        .iter()
        .enumerate()
        .map(|(n, plane)| {
            let path = dir.join(format!("affinity_{n:02}.png"));
            io::write_gray_png(&path, plane)?;
            Ok(path)
        })
        .collect()
}
