//! Detection and localization metrics: ROC-AUC, equal-error-rate threshold,
//! F1, and their aggregation over a dataset.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Plane;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("metric needs both positive and negative labels"));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve as the normalized Mann–Whitney statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let idx = order(scores);
    let mut negatives_below = 0usize;
    let mut twice_u = 0u128;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += (p as u128) * (2 * negatives_below as u128 + n as u128);
        negatives_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// False-positive and false-negative rates when `score > t` predicts positive.
pub fn error_rates(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let (mut fp, mut fn_, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos += 1;
            fn_ += usize::from(s <= t);
        } else {
            neg += 1;
            fp += usize::from(s > t);
        }
    }
    (fp as f64 / neg as f64, fn_ as f64 / pos as f64)
}

/// Candidate thresholds: `min − 1`, midpoints of adjacent distinct scores, `max + 1`.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut unique: Vec<f64> = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut out = Vec::with_capacity(unique.len() + 1);
    if let (Some(&lo), Some(&hi)) = (unique.first(), unique.last()) {
        out.push(lo - 1.0);
        out.extend(unique.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        out.push(hi + 1.0);
    }
    out
}

/// Threshold minimizing `|FPR − FNR|`, ties broken toward the smaller threshold.
pub fn eer_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let idx = order(scores);
    // Sweep upward: below every score, all samples are predicted positive.
    let candidates = threshold_candidates(scores);
    let (mut fp, mut fn_) = (neg, 0usize);
    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut k = 0;
    for &t in &candidates {
        while k < idx.len() && scores[idx[k]] <= t {
            if labels[idx[k]] {
                fn_ += 1;
            } else {
                fp -= 1;
            }
            k += 1;
        }
        let gap = (fp as f64 / neg as f64 - fn_ as f64 / pos as f64).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

/// `2TP / (2TP + FP + FN)` with `score > t` as positive; 0 when the denominator is 0.
pub fn f1_at_threshold(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > t, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// How pixel-level scores are aggregated across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PixelAggregation {
    /// Per-image metrics averaged over images whose mask has both classes.
    #[default]
    PerImage,
    /// One metric over the pooled pixels of all images.
    Pooled,
}

/// Ground truth and prediction for one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub label: bool,
    pub score: f64,
    pub mask: Plane,
    pub predicted: Plane,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MetricReport {
    pub pixel_auc: Option<f64>,
    pub image_auc: Option<f64>,
    pub pixel_f1: Option<f64>,
    pub image_f1: Option<f64>,
    /// Image-level EER threshold.
    pub eer_threshold: Option<f64>,
    pub n_images: usize,
    pub n_pixels: usize,
    /// Images contributing to the pixel metrics.
    pub n_pixel_images: usize,
    pub aggregation: PixelAggregation,
}

fn binary_labels(mask: &Plane) -> Vec<bool> {
    mask.data.iter().map(|&v| v > 0.5).collect()
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn pixel_metrics(scores: &[f64], labels: &[bool]) -> Result<Option<(f64, f64)>> {
    match (auc(scores, labels), eer_threshold(scores, labels)) {
        (Ok(a), Ok(t)) => Ok(Some((a, f1_at_threshold(scores, labels, t)))),
        (Err(Error::Undefined(_)), _) | (_, Err(Error::Undefined(_))) => Ok(None),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Aggregates per-image results into a report. Invariant to the order of `items`.
pub fn summarize(items: &[ImageScore], aggregation: PixelAggregation) -> Result<MetricReport> {
    let mut report = MetricReport { n_images: items.len(), aggregation, ..MetricReport::default() };
    for item in items {
        if item.mask.shape() != item.predicted.shape() {
            return Err(shape_err!("mask {:?} vs prediction {:?}", item.mask.shape(), item.predicted.shape()));
        }
        report.n_pixels += item.mask.data.len();
    }
    let scores: Vec<f64> = items.iter().map(|i| i.score).collect();
    let labels: Vec<bool> = items.iter().map(|i| i.label).collect();
    match (auc(&scores, &labels), eer_threshold(&scores, &labels)) {
        (Ok(a), Ok(t)) => {
            report.image_auc = Some(a);
            report.eer_threshold = Some(t);
            report.image_f1 = Some(f1_at_threshold(&scores, &labels, t));
        }
        (Err(Error::Undefined(_)), _) => {}
        (Err(e), _) | (_, Err(e)) => return Err(e),
    }
    match aggregation {
        PixelAggregation::PerImage => {
            let mut aucs = Vec::new();
            let mut f1s = Vec::new();
            for item in items {
                if let Some((a, f)) = pixel_metrics(&item.predicted.data, &binary_labels(&item.mask))? {
                    aucs.push(a);
                    f1s.push(f);
                }
            }
            report.n_pixel_images = aucs.len();
            report.pixel_auc = stable_mean(aucs);
            report.pixel_f1 = stable_mean(f1s);
        }
        PixelAggregation::Pooled => {
            let scores: Vec<f64> = items.iter().flat_map(|i| i.predicted.data.iter().copied()).collect();
            let labels: Vec<bool> = items.iter().flat_map(|i| binary_labels(&i.mask)).collect();
            if let Some((a, f)) = pixel_metrics(&scores, &labels)? {
                report.pixel_auc = Some(a);
                report.pixel_f1 = Some(f);
                report.n_pixel_images = items.len();
            }
        }
    }
    Ok(report)
}

/// Checks a report's values lie in `[0, 1]`.
pub fn validate_report(report: &MetricReport) -> Result<()> {
    for v in [report.pixel_auc, report.image_auc, report.pixel_f1, report.image_f1].into_iter().flatten() {
        if !(0.0..=1.0).contains(&v) {
            return Err(param_err!("metric value {v} outside [0, 1]"));
        }
    }
    Ok(())
}
