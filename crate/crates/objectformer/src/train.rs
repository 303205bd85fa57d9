//! Training loop, checkpoints and the per-epoch metrics log.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use objectformer_core::distort::{resize_image, resize_nearest};
use objectformer_core::model::{gradients, LossBreakdown, ModelWeights};
use objectformer_core::optim::{mean_gradients, AdamConfig, AdamState};
use objectformer_core::{Plane, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{RunError, RunResult};
use crate::manifest::{LoadedSample, Manifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FORMAT: &str = "objectformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Separates the augmentation random stream from the shuffling stream.
const AUGMENT_STREAM: u64 = 0xA5A5_5A5A_0F0F_F0F0;

/// Self-describing snapshot of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    /// Full configuration of the run that produced the weights.
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub weights: ModelWeights,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn new(config: RunConfig, epoch: usize, weights: ModelWeights, optimizer: AdamState) -> Self {
        Self { format: CHECKPOINT_FORMAT.into(), format_version: CHECKPOINT_VERSION, config, epoch, weights, optimizer }
    }

    /// Writes via a temporary file and rename so readers never see a partial checkpoint.
    pub fn save(&self, path: &Path) -> RunResult<()> {
        let text = serde_json::to_string(self).map_err(|e| RunError::format(path, e))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let header: serde_json::Value = serde_json::from_str(&text).map_err(|e| RunError::format(path, e))?;
        if header.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(RunError::format(path, "not an objectformer checkpoint"));
        }
        match header.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            other => return Err(RunError::format(path, format!("unsupported checkpoint version {other:?}"))),
        }
        let ck: Checkpoint = serde_json::from_value(header).map_err(|e| RunError::format(path, e))?;
        ck.weights.check_against(&ck.config.model).map_err(|e| RunError::format(path, e))?;
        ck.optimizer.m.check_against(&ck.config.model).map_err(|e| RunError::format(path, e))?;
        ck.optimizer.v.check_against(&ck.config.model).map_err(|e| RunError::format(path, e))?;
        Ok(ck)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> RunResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| RunError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunError::io(path, e))
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_seg: f64,
    pub lr: f64,
}

pub fn read_metrics(path: &Path) -> RunResult<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| RunError::format(path, e)))
        .collect()
}

/// Brings a sample to the model's input size (bilinear image, nearest mask).
pub fn fit_to_model(sample: LoadedSample, size: usize) -> RunResult<LoadedSample> {
    if sample.image.height() == size && sample.image.width() == size {
        return Ok(sample);
    }
    Ok(LoadedSample { image: resize_image(&sample.image, size, size)?, mask: resize_nearest(&sample.mask, size, size), label: sample.label })
}

/// Loads every sample of a manifest, resized to `size`.
pub fn load_all(manifest: &Manifest, size: usize) -> RunResult<Vec<LoadedSample>> {
    (0..manifest.len()).into_par_iter().map(|i| fit_to_model(manifest.load(i)?, size)).collect()
}

/// One optimizer step on `batch`. Returns the mean pre-update losses.
pub fn train_step(
    weights: &mut ModelWeights,
    optimizer: &mut AdamState,
    batch: &[&LoadedSample],
    config: &RunConfig,
    lr: f64,
) -> RunResult<Vec<LossBreakdown>> {
    let results: Vec<(LossBreakdown, ModelWeights)> = batch
        .par_iter()
        .map(|s| gradients(&s.image, f64::from(s.label), &s.mask, weights, &config.model))
        .collect::<Result<_, _>>()?;
    let (losses, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let grad = mean_gradients(&grads).ok_or_else(|| RunError::Usage("empty batch".into()))?;
    optimizer.update(weights, &grad, lr);
    if !weights.is_finite() {
        return Err(objectformer_core::Error::NonFinite("weights after optimizer step".into()).into());
    }
    Ok(losses)
}

/// One of the eight flips/rotations of the square, applied to image and mask alike.
pub fn dihedral(sample: &LoadedSample, t: u8) -> RunResult<LoadedSample> {
    let n = sample.image.height();
    if sample.image.width() != n {
        return Err(RunError::Usage("augmentation needs square images".into()));
    }
    let map = |y: usize, x: usize| {
        let (y, x) = if t & 4 != 0 { (x, y) } else { (y, x) };
        let y = if t & 2 != 0 { n - 1 - y } else { y };
        let x = if t & 1 != 0 { n - 1 - x } else { x };
        (y, x)
    };
    Ok(LoadedSample {
        image: RgbImage::from_fn(n, n, |y, x| {
            let (sy, sx) = map(y, x);
            sample.image.pixel(sy, sx)
        })?,
        mask: Plane::from_fn(n, n, |y, x| {
            let (sy, sx) = map(y, x);
            sample.mask.get(sy, sx)
        }),
        label: sample.label,
    })
}

/// Sample order for a zero-based epoch.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add(epoch as u64)));
    order
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub weights: ModelWeights,
}

fn truncate_metrics(path: &Path, keep_epochs: usize) -> RunResult<()> {
    let kept: Vec<EpochMetrics> = match fs::metadata(path) {
        Ok(_) => read_metrics(path)?.into_iter().filter(|m| m.epoch <= keep_epochs).collect(),
        Err(_) => Vec::new(),
    };
    let text: String = kept.iter().map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n").collect();
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

/// Trains on `config.train_manifest()`, writing the checkpoint, metrics log
/// and effective config into `config.out`.
pub fn train(config: &RunConfig) -> RunResult<TrainOutcome> {
    let manifest_path = config.train_manifest();
    let manifest = Manifest::read(&manifest_path)?;
    if manifest.is_empty() {
        return Err(RunError::format(&manifest_path, "manifest has no samples"));
    }
    let samples = load_all(&manifest, config.model.image_size)?;
    train_on(config, &samples)
}

/// Trains on samples already in memory.
pub fn train_on(config: &RunConfig, samples: &[LoadedSample]) -> RunResult<TrainOutcome> {
    if samples.is_empty() {
        return Err(RunError::Usage("no training samples".into()));
    }
    let out = &config.out;
    config.write_effective(out)?;
    let checkpoint_path = config.checkpoint_path();
    let metrics_path = out.join(METRICS_FILE);
    let (mut weights, mut optimizer, start) = if config.train.resume {
        let ck = Checkpoint::load(&checkpoint_path)?;
        if ck.config.model != config.model {
            return Err(RunError::Usage(format!("{} was trained with a different model config", checkpoint_path.display())));
        }
        info!("resuming from epoch {} of {}", ck.epoch, checkpoint_path.display());
        (ck.weights, ck.optimizer, ck.epoch)
    } else {
        let weights = ModelWeights::init(&config.model)?;
        let optimizer = AdamState::new(&weights, AdamConfig::default());
        (weights, optimizer, 0)
    };
    truncate_metrics(&metrics_path, start)?;
    let mut log = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| RunError::io(&metrics_path, e))?;
    let schedule = config.train.schedule();
    let mut history = Vec::new();
    for epoch in start..config.train.epochs {
        let lr = schedule.lr_at(epoch);
        let order = epoch_order(samples.len(), config.shuffle_seed(), epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed().wrapping_add(epoch as u64) ^ AUGMENT_STREAM);
        let (mut cls, mut seg) = (0.0, 0.0);
        for chunk in order.chunks(config.train.batch_size) {
            let augmented: Vec<LoadedSample> = if config.train.augment {
                chunk.iter().map(|&i| dihedral(&samples[i], rng.random_range(0..8))).collect::<RunResult<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&LoadedSample> =
                if config.train.augment { augmented.iter().collect() } else { chunk.iter().map(|&i| &samples[i]).collect() };
            for l in train_step(&mut weights, &mut optimizer, &batch, config, lr)? {
                cls += l.cls;
                seg += l.seg;
            }
        }
        let n = samples.len() as f64;
        let record = EpochMetrics { epoch: epoch + 1, loss_cls: cls / n, loss_seg: seg / n, lr };
        writeln!(log, "{}", serde_json::to_string(&record).expect("metrics serialize")).map_err(|e| RunError::io(&metrics_path, e))?;
        info!("epoch {}: loss_cls {:.5} loss_seg {:.5} lr {:e}", record.epoch, record.loss_cls, record.loss_seg, lr);
        history.push(record);
        if (epoch + 1) % config.train.checkpoint_every == 0 || epoch + 1 == config.train.epochs {
            Checkpoint::new(config.clone(), epoch + 1, weights.clone(), optimizer.clone()).save(&checkpoint_path)?;
        }
    }
    if start >= config.train.epochs {
        Checkpoint::new(config.clone(), start, weights.clone(), optimizer.clone()).save(&checkpoint_path)?;
    }
    Ok(TrainOutcome { checkpoint: checkpoint_path, metrics: metrics_path, history, weights })
}
