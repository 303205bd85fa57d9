//! Adam optimizer and step-decay learning-rate schedule.

#[allow(unused_imports)]
use num_traits::Float;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::model::ModelWeights;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate divided by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StepDecay {
    pub base_lr: f64,
    pub every: usize,
    pub factor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self { base_lr: 1e-4, every: 30, factor: 10.0 }
    }
}

impl StepDecay {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(param_err!("learning rate {} must be positive", self.base_lr));
        }
        if self.every == 0 || !(self.factor >= 1.0) {
            return Err(param_err!("decay needs every ≥ 1 and factor ≥ 1"));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr / self.factor.powi((epoch / self.every) as i32)
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ModelWeights,
    pub v: ModelWeights,
}

impl AdamState {
    pub fn new(weights: &ModelWeights, config: AdamConfig) -> Self {
        Self { config, step: 0, m: weights.zeros_like(), v: weights.zeros_like() }
    }

    /// One bias-corrected Adam update of `weights` in place.
    pub fn update(&mut self, weights: &mut ModelWeights, grad: &ModelWeights, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let params = weights.tensors_mut();
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((( _, w), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Mean of per-sample gradients, summed in slice order so the result does
/// not depend on how the samples were computed.
pub fn mean_gradients(grads: &[ModelWeights]) -> Option<ModelWeights> {
    let (first, rest) = grads.split_first()?;
    let mut acc = first.clone();
    for g in rest {
        acc.add_scaled(g, 1.0);
    }
    let n = grads.len() as f64;
    for (_, t) in acc.tensors_mut() {
        t.iter_mut().for_each(|v| *v /= n);
    }
    Some(acc)
}
