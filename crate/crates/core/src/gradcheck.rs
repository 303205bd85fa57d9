//! Finite-difference verification of the analytic model gradients.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::RgbImage;
use crate::model::{forward, gradients, loss, ModelConfig, ModelWeights};
use crate::tensor::Plane;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the worst relative error of each group.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Central differences at
    /// step 1e-5 carry ~1e-10 absolute roundoff, so gradients much smaller than
    /// the floor are judged by absolute error instead.
    pub floor: f64,
    /// Seed for the probe image and weights.
    pub seed: u64,
    /// Test hook: adds a large offset to the analytic gradient of the named group.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-5, seed: 0, inject_fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GroupResult {
    pub name: String,
    pub entries: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_relative_error).fold(0.0, f64::max)
    }
}

/// Deterministic probe sample: smooth colours plus noise and a rectangular tamper mask.
pub fn probe_sample(size: usize, seed: u64) -> Result<(RgbImage, Plane)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = RgbImage::from_fn(size, size, |y, x| {
        let t = (y + x) as f64 / (2 * size) as f64;
        [0.2 + 0.6 * t + 0.1 * rng.random::<f64>(), 0.5 + 0.3 * rng.random::<f64>(), 0.8 - 0.5 * t]
    })?;
    let (lo, hi) = (size / 4, size / 4 + size / 3);
    let mask = Plane::from_fn(size, size, |y, x| if (lo..hi).contains(&y) && (lo..hi + 2).contains(&x) { 1.0 } else { 0.0 });
    Ok((image, mask))
}

fn loss_at(image: &RgbImage, label: f64, mask: &Plane, weights: &ModelWeights, config: &ModelConfig) -> Result<f64> {
    let out = forward(image, weights, config)?;
    Ok(loss(label, out.label_score, mask, &out.mask, config.lambda)?.total)
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every entry of every weight tensor for a freshly initialized model.
pub fn run_gradcheck(config: &ModelConfig, options: &GradcheckOptions) -> Result<GradcheckReport> {
    let config = ModelConfig { seed: options.seed, ..config.clone() };
    let weights = ModelWeights::init(&config)?;
    let (image, mask) = probe_sample(config.image_size, options.seed.wrapping_add(1))?;
    check_gradients(&image, 1.0, &mask, &weights, &config, options)
}

pub fn check_gradients(
    image: &RgbImage,
    label: f64,
    mask: &Plane,
    weights: &ModelWeights,
    config: &ModelConfig,
    options: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let (_, mut analytic) = gradients(image, label, mask, weights, config)?;
    if let Some(target) = &options.inject_fault {
        for (name, t) in analytic.tensors_mut() {
            if &name == target {
                t.iter_mut().for_each(|v| *v += 1.0);
            }
        }
    }
    let names: Vec<(String, usize)> = weights.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let analytic_tensors = analytic.tensors();
    let mut probe = weights.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (group, (name, len)) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..*len {
            let original = weights.tensors()[group].1[i];
            probe.tensors_mut()[group].1[i] = original + options.step;
            let plus = loss_at(image, label, mask, &probe, config)?;
            probe.tensors_mut()[group].1[i] = original - options.step;
            let minus = loss_at(image, label, mask, &probe, config)?;
            probe.tensors_mut()[group].1[i] = original;
            let numeric = (plus - minus) / (2.0 * options.step);
            worst = worst.max(relative_error(analytic_tensors[group].1[i], numeric, options.floor));
        }
        groups.push(GroupResult { name: name.clone(), entries: *len, worst_relative_error: worst, passed: worst < options.tolerance });
    }
    Ok(GradcheckReport { groups, tolerance: options.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn tiny_model_passes_and_lists_each_group_once() {
        let config = ModelConfig::tiny();
        let report = run_gradcheck(&config, &GradcheckOptions::default()).unwrap();
        for g in &report.groups {
            assert!(g.passed, "{} worst {:e}", g.name, g.worst_relative_error);
        }
        let expected: Vec<String> = ModelWeights::zeros(&config).unwrap().tensors().into_iter().map(|(n, _)| n).collect();
        let got: Vec<String> = report.groups.iter().map(|g| g.name.clone()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn ablated_models_pass() {
        for (hfe, bcim) in [(false, true), (true, false)] {
            let config = ModelConfig { use_hfe: hfe, use_bcim: bcim, ..ModelConfig::tiny() };
            let report = run_gradcheck(&config, &GradcheckOptions { seed: 3, ..GradcheckOptions::default() }).unwrap();
            assert!(report.passed(), "hfe={hfe} bcim={bcim}: {:?}", report.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let options = GradcheckOptions { inject_fault: Some("encoder.0.w_c".into()), ..GradcheckOptions::default() };
        let report = run_gradcheck(&ModelConfig::tiny(), &options).unwrap();
        let failed: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
        assert_eq!(failed, ["encoder.0.w_c"]);
    }
}
