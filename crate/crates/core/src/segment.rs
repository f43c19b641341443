//! Activity interval detection on the PC1 series.
//!
//! Motion shows up as bursts of sliding-window variance. A window is "on"
//! when its variance exceeds a threshold calibrated on a static recording;
//! runs of on-windows are merged, filtered by duration and padded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("series of length {len} is shorter than the required {required}")]
    SeriesTooShort { len: usize, required: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    /// Sliding window length in packets.
    pub window_m: usize,
    pub threshold_k: f64,
    pub min_on_windows: usize,
    pub merge_gap_s: f64,
    pub min_duration_s: f64,
    pub pad_s: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            window_m: 10,
            threshold_k: 3.0,
            min_on_windows: 5,
            merge_gap_s: 0.5,
            min_duration_s: 1.0,
            pad_s: 0.25,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.window_m < 2 {
            return Err(SegmentError::InvalidConfig("window_m must be >= 2".into()));
        }
        let durations = [self.merge_gap_s, self.min_duration_s, self.pad_s];
        if durations.iter().any(|d| !(*d >= 0.0)) || !(self.threshold_k >= 0.0) {
            return Err(SegmentError::InvalidConfig(
                "durations and threshold_k must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Population variance of every length-`m` window (stride 1).
pub fn sliding_variance(series: &[f64], m: usize) -> Result<Vec<f64>, SegmentError> {
    if m == 0 || series.len() < m {
        return Err(SegmentError::SeriesTooShort {
            len: series.len(),
            required: m.max(1),
        });
    }
    let inv = 1.0 / m as f64;
    Ok(series
        .windows(m)
        .map(|w| {
            let mu = w.iter().sum::<f64>() * inv;
            w.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() * inv
        })
        .collect())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean + k * std` of the sliding variance over a static recording.
pub fn estimate_threshold(static_pc1: &[f64], cfg: &SegmenterConfig) -> Result<f64, SegmentError> {
    cfg.validate()?;
    let required = 10 * cfg.window_m;
    if static_pc1.len() < required {
        return Err(SegmentError::SeriesTooShort {
            len: static_pc1.len(),
            required,
        });
    }
    let var = sliding_variance(static_pc1, cfg.window_m)?;
    let (mean, std) = mean_std(&var);
    Ok(mean + cfg.threshold_k * std)
}

/// Per-window on/off mask: `true` where the window variance exceeds `threshold`.
pub fn on_mask(pc1: &[f64], threshold: f64, window_m: usize) -> Vec<bool> {
    match sliding_variance(pc1, window_m) {
        Ok(v) => v.into_iter().map(|x| x > threshold).collect(),
        Err(_) => Vec::new(),
    }
}

/// Detected activity intervals as sorted, disjoint `[start, end)` frame ranges.
pub fn detect_intervals(
    pc1: &[f64],
    threshold: f64,
    cfg: &SegmenterConfig,
    fs: f64,
) -> Result<Vec<(usize, usize)>, SegmentError> {
    cfg.validate()?;
    if !(fs > 0.0) || !(threshold >= 0.0) {
        return Err(SegmentError::InvalidConfig(
            "fs must be positive and threshold non-negative".into(),
        ));
    }
    let n = pc1.len();
    let m = cfg.window_m;
    let mask = on_mask(pc1, threshold, m);

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    let mut j = 0;
    while j < mask.len() {
        if !mask[j] {
            j += 1;
            continue;
        }
        let run_start = j;
        while j < mask.len() && mask[j] {
            j += 1;
        }
        if j - run_start >= cfg.min_on_windows.max(1) {
            candidates.push((run_start, j - 1 + m));
        }
    }

    let merge_gap = (cfg.merge_gap_s * fs).round() as usize;
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in candidates {
        match merged.last_mut() {
            Some(last) if s < last.1 + merge_gap => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }

    let min_len = (cfg.min_duration_s * fs).round() as usize;
    let pad = (cfg.pad_s * fs).round() as usize;
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (s, e) in merged.into_iter().filter(|(s, e)| e - s >= min_len) {
        let s = s.saturating_sub(pad);
        let e = (e + pad).min(n);
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    Ok(out)
}

/// Intersection-over-union of two `[start, end)` ranges.
pub fn interval_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over ground-truth intervals of the best IoU against any detection.
pub fn mean_best_iou(detected: &[(usize, usize)], truth: &[(usize, usize)]) -> f64 {
    if truth.is_empty() {
        return if detected.is_empty() { 1.0 } else { 0.0 };
    }
    let total: f64 = truth
        .iter()
        .map(|&t| {
            detected
                .iter()
                .map(|&d| interval_iou(d, t))
                .fold(0.0, f64::max)
        })
        .sum();
    total / truth.len() as f64
}
