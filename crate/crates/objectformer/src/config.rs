//! Run configuration: defaults, TOML files with dotted keys, command-line
//! overrides, and the effective config written next to every output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use objectformer_core::metrics::PixelAggregation;
use objectformer_core::model::ModelConfig;
use objectformer_core::optim::StepDecay;
use objectformer_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{RunError, RunResult};

/// Environment variable that overrides `data.root`.
pub const DATA_ROOT_ENV: &str = "OBJECTFORMER_DATA_ROOT";

/// File name of the effective config written next to outputs.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; sub-seeds left unset are derived from it.
    pub seed: u64,
    /// Output directory for checkpoints, logs and reports.
    pub out: PathBuf,
    /// Checkpoint to load (eval, predict, robustness, resumed training).
    pub checkpoint: Option<PathBuf>,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Named sub-seeds for data generation, weight initialization and shuffling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: Option<u64>,
    pub init: Option<u64>,
    pub shuffle: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory written by `synth` and read by the other commands.
    pub root: PathBuf,
    /// Directory of natural source images; procedural sources when unset.
    pub source_dir: Option<PathBuf>,
    /// Training manifest; `<root>/manifest.jsonl` when unset.
    pub manifest: Option<PathBuf>,
    /// Evaluation manifest; the training manifest when unset.
    pub eval_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("data"), source_dir: None, manifest: None, eval_manifest: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Divide the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    /// Continue from `checkpoint` (or `<out>/checkpoint.json`).
    pub resume: bool,
    /// Apply a seeded random flip/rotation to every training sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 90, batch_size: 24, lr: 1e-4, decay_every: 30, decay_factor: 10.0, checkpoint_every: 10, resume: false, augment: false }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> StepDecay {
        StepDecay { base_lr: self.lr, every: self.decay_every, factor: self.decay_factor }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub aggregation: PixelAggregation,
    /// Score with the ground truth instead of a checkpoint (harness self-check).
    pub oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/objectformer"),
            checkpoint: None,
            seeds: Seeds::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed `k` of `seed`, kept below 2⁶³ so it survives a TOML round trip.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    splitmix64(seed ^ splitmix64(k)) >> 1
}

impl RunConfig {
    /// Desk-scale preset: the tiny model on 32×32 synthetic images.
    pub fn tiny() -> Self {
        let mut c = Self { model: ModelConfig::tiny(), ..Self::default() };
        c.synth.image_size = 32;
        c.train = TrainConfig { epochs: 60, batch_size: 8, lr: 2e-3, decay_every: 40, decay_factor: 10.0, checkpoint_every: 10, resume: false, augment: true };
        c
    }

    /// Fills unset sub-seeds from the global seed and threads the init seed into the model.
    pub fn resolve(mut self) -> RunResult<Self> {
        let seed = self.seed;
        self.seeds.data.get_or_insert(derive_seed(seed, 1));
        let init = *self.seeds.init.get_or_insert(derive_seed(seed, 2));
        self.seeds.shuffle.get_or_insert(derive_seed(seed, 3));
        self.model.seed = init;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> RunResult<()> {
        let usage = |e: objectformer_core::Error| RunError::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.synth.validate().map_err(usage)?;
        self.train.schedule().validate().map_err(usage)?;
        if self.train.batch_size == 0 || self.train.checkpoint_every == 0 {
            return Err(RunError::Usage("train.batch_size and train.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.seeds.data.unwrap_or_else(|| derive_seed(self.seed, 1))
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.seeds.shuffle.unwrap_or_else(|| derive_seed(self.seed, 3))
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data.manifest.clone().unwrap_or_else(|| self.data.root.join(crate::manifest::MANIFEST_FILE))
    }

    pub fn eval_manifest(&self) -> PathBuf {
        self.data.eval_manifest.clone().unwrap_or_else(|| self.train_manifest())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(crate::train::CHECKPOINT_FILE))
    }

    /// Effective config as flat `dotted.key = value` lines.
    pub fn to_flat_toml(&self) -> RunResult<String> {
        let value = Value::try_from(self).map_err(|e| RunError::Usage(format!("config does not serialize: {e}")))?;
        let mut out = String::new();
        if let Value::Table(t) = value {
            flatten(&t, "", &mut out);
        }
        Ok(out)
    }

    pub fn write_effective(&self, dir: &Path) -> RunResult<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_flat_toml()?).map_err(|e| RunError::io(&path, e))?;
        Ok(path)
    }
}

fn flatten(table: &Table, prefix: &str, out: &mut String) {
    for (key, value) in table {
        let name = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match value {
            Value::Table(inner) => flatten(inner, &name, out),
            other => {
                let _ = writeln!(out, "{name} = {other}");
            }
        }
    }
}

/// Sets `dotted.key` in a nested table, creating intermediate tables.
fn set_dotted(table: &mut Table, key: &str, value: Value) -> RunResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| RunError::Usage(format!("empty key in override `{key}`")))?;
    let mut cursor = table;
    for part in parts {
        let entry = cursor.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| RunError::Usage(format!("`{part}` in `{key}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set key=value`: a TOML value, or a bare string.
fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Layers that make up a run's configuration, lowest precedence first.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub tiny: bool,
    pub file: Option<PathBuf>,
    pub data_root_env: Option<String>,
    /// `key=value` overrides (command-line flags are expressed this way too).
    pub overrides: Vec<(String, String)>,
}

impl ConfigSources {
    pub fn load(&self) -> RunResult<RunConfig> {
        let base = if self.tiny { RunConfig::tiny() } else { RunConfig::default() };
        let mut table = match Value::try_from(&base) {
            Ok(Value::Table(t)) => t,
            _ => return Err(RunError::Usage("default config does not serialize".into())),
        };
        if let Some(path) = &self.file {
            let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
            let file: Table = text.parse().map_err(|e| RunError::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut table, file);
        }
        if let Some(root) = &self.data_root_env {
            set_dotted(&mut table, "data.root", Value::String(root.clone()))?;
        }
        for (key, raw) in &self.overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        let config: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| RunError::Usage(format!("config: {e}")))?;
        config.resolve()
    }
}

/// Splits `key=value`.
pub fn parse_override(raw: &str) -> RunResult<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| RunError::Usage(format!("override `{raw}` is not key=value")))
}
