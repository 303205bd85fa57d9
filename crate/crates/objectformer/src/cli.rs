//! Command-line surface: argument parsing, config layering and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use objectformer_core::gradcheck::{run_gradcheck, GradcheckOptions};
use objectformer_core::model::ModelConfig;
use objectformer_core::synth::TamperKind;
use toml::Value;

use crate::config::{parse_override, ConfigSources, RunConfig, DATA_ROOT_ENV};
use crate::dataset::generate_dataset;
use crate::error::{RunError, RunResult};
use crate::eval::{export_affinity_maps, run_eval, run_robustness, Predictor};
use crate::predict::predict_file;
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "objectformer", version, about = "Image manipulation detection and localization")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file with flat `dotted.key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed; data, init and shuffle seeds derive from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Checkpoint to read (and, for training, to write).
    #[arg(long, global = true, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Start from the desk-scale tiny preset instead of the full defaults.
    #[arg(long, global = true)]
    pub tiny: bool,
    /// Override any config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tampering dataset under `data.root`.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Kind weights, e.g. `pristine=1.0` or `splice=2,removal=1`; unnamed kinds get 0.
        #[arg(long)]
        mix: Option<String>,
        /// Directory of natural source images (procedural sources otherwise).
        #[arg(long, value_name = "DIR")]
        source_dir: Option<PathBuf>,
    },
    /// Train on the training manifest.
    Train {
        /// Continue from the checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate on the evaluation manifest and write a metric report.
    Eval(EvalArgs),
    /// Evaluate under the nine robustness distortions.
    Robustness(EvalArgs),
    /// Predict the mask and tamper score of one image.
    Predict {
        image: PathBuf,
        /// Also export first-layer affinity maps into `<out>/affinity`.
        #[arg(long)]
        affinity: bool,
    },
    /// Compare analytic gradients with finite differences on the tiny model.
    Gradcheck {
        /// Corrupt one parameter group's analytic gradient (self-test of the checker).
        #[arg(long, hide = true, value_name = "GROUP")]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest to evaluate (defaults to `data.eval_manifest`).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Score with the ground truth instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// Pool all pixels into one AUC instead of averaging per image.
    #[arg(long)]
    pub pooled: bool,
}

fn string(value: impl Into<String>) -> String {
    Value::String(value.into()).to_string()
}

fn path(p: &std::path::Path) -> String {
    string(p.to_string_lossy())
}

/// `pristine=1.0,splice=2` → overrides of all four mix weights.
fn mix_overrides(raw: &str) -> RunResult<Vec<(String, String)>> {
    let mut weights = [0.0f64; 4];
    for part in raw.split(',').filter(|s| !s.trim().is_empty()) {
        let (name, value) = parse_override(part)?;
        let kind = TamperKind::from_name(&name).ok_or_else(|| RunError::Usage(format!("unknown kind `{name}` in --mix")))?;
        let w: f64 = value.parse().map_err(|_| RunError::Usage(format!("weight `{value}` in --mix is not a number")))?;
        weights[TamperKind::ALL.iter().position(|&k| k == kind).expect("known kind")] = w;
    }
    Ok(TamperKind::ALL.iter().zip(weights).map(|(k, w)| (format!("synth.mix.{}", k.name()), format!("{w:?}"))).collect())
}

impl Cli {
    /// Config layers: preset, file, environment, `--set`, then dedicated flags.
    pub fn sources(&self) -> RunResult<ConfigSources> {
        let g = &self.global;
        let mut overrides = g.set.iter().map(|s| parse_override(s)).collect::<RunResult<Vec<_>>>()?;
        if let Some(seed) = g.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(out) = &g.out {
            overrides.push(("out".into(), path(out)));
        }
        if let Some(ck) = &g.checkpoint {
            overrides.push(("checkpoint".into(), path(ck)));
        }
        match &self.command {
            Command::Synth { n, mix, source_dir } => {
                if let Some(n) = n {
                    overrides.push(("synth.count".into(), n.to_string()));
                }
                if let Some(mix) = mix {
                    overrides.extend(mix_overrides(mix)?);
                }
                if let Some(dir) = source_dir {
                    overrides.push(("data.source_dir".into(), path(dir)));
                }
            }
            Command::Train { resume, epochs } => {
                if *resume {
                    overrides.push(("train.resume".into(), "true".into()));
                }
                if let Some(e) = epochs {
                    overrides.push(("train.epochs".into(), e.to_string()));
                }
            }
            Command::Eval(args) | Command::Robustness(args) => {
                if let Some(m) = &args.manifest {
                    overrides.push(("data.eval_manifest".into(), path(m)));
                }
                if args.oracle {
                    overrides.push(("eval.oracle".into(), "true".into()));
                }
                if args.pooled {
                    overrides.push(("eval.aggregation".into(), string("pooled")));
                }
            }
            Command::Predict { .. } | Command::Gradcheck { .. } => {}
        }
        Ok(ConfigSources {
            tiny: g.tiny,
            file: g.config.clone(),
            data_root_env: std::env::var(DATA_ROOT_ENV).ok().filter(|s| !s.is_empty()),
            overrides,
        })
    }
}

/// Executes a parsed command line; the error's exit code is the process status.
pub fn run(cli: &Cli) -> RunResult<()> {
    let config = cli.sources()?.load()?;
    match &cli.command {
        Command::Synth { .. } => cmd_synth(&config),
        Command::Train { .. } => cmd_train(&config),
        Command::Eval(_) => cmd_eval(&config),
        Command::Robustness(_) => cmd_robustness(&config),
        Command::Predict { image, affinity } => cmd_predict(&config, image, *affinity),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(&config, inject_fault.clone()),
    }
}

fn cmd_synth(config: &RunConfig) -> RunResult<()> {
    let root = &config.data.root;
    let summary = generate_dataset(&config.synth, config.data_seed(), root, config.data.source_dir.as_deref())?;
    config.write_effective(root)?;
    println!("{}", summary.manifest.display());
    for (kind, n) in TamperKind::ALL.iter().zip(summary.counts) {
        println!("{}\t{n}", kind.name());
    }
    Ok(())
}

fn cmd_train(config: &RunConfig) -> RunResult<()> {
    let outcome = train(config)?;
    if let Some(last) = outcome.history.last() {
        println!("epoch {}\tloss_cls {:.6}\tloss_seg {:.6}", last.epoch, last.loss_cls, last.loss_seg);
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn cmd_eval(config: &RunConfig) -> RunResult<()> {
    let (path, r) = run_eval(config)?;
    println!("pixel_auc {}\timage_auc {}\tpixel_f1 {}\timage_f1 {}", show(r.pixel_auc), show(r.image_auc), show(r.pixel_f1), show(r.image_f1));
    println!("{}", path.display());
    Ok(())
}

fn cmd_robustness(config: &RunConfig) -> RunResult<()> {
    let (path, rows) = run_robustness(config)?;
    for row in &rows {
        println!("{}\t{}", row.distortion, show(row.report.pixel_auc));
    }
    println!("{}", path.display());
    Ok(())
}

fn cmd_predict(config: &RunConfig, image: &std::path::Path, affinity: bool) -> RunResult<()> {
    let Predictor::Model { weights, config: model } = Predictor::from_checkpoint(&config.checkpoint_path())? else {
        unreachable!("checkpoints always hold a model");
    };
    let outcome = predict_file(image, &weights, &model, &config.out)?;
    if affinity {
        let img = crate::io::read_rgb(image)?;
        export_affinity_maps(&img, &weights, &model, &config.out.join("affinity"))?;
    }
    config.write_effective(&config.out)?;
    println!("{:.6}", outcome.label_score);
    println!("{}", outcome.soft_mask.display());
    println!("{}", outcome.binary_mask.display());
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig, inject_fault: Option<String>) -> RunResult<()> {
    let model = ModelConfig { seed: config.model.seed, ..ModelConfig::tiny() };
    let options = GradcheckOptions { seed: config.seed, inject_fault, ..GradcheckOptions::default() };
    let report = run_gradcheck(&model, &options)?;
    for g in &report.groups {
        println!("{}\t{:.3e}\t{}", g.name, g.worst_relative_error, if g.passed { "ok" } else { "FAIL" });
    }
    if report.passed() {
        println!("gradcheck passed: worst relative error {:.3e} < {:e}", report.worst(), report.tolerance);
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
        Err(RunError::Verification(format!("gradient mismatch in {}", names.join(", "))))
    }
}
