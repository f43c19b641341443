//! Denoising and dimensionality reduction of the raw subcarrier stream.
//!
//! Each subcarrier goes through a Hampel outlier filter and a centered
//! moving average; the 30 cleaned columns are then reduced to their first
//! principal component.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi_model::{CsiTrace, NUM_SUBCARRIERS};

/// Scale factor turning a median absolute deviation into a Gaussian sigma.
const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("series of length {len} is shorter than window {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("PCA needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite value in input")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub hampel_window: usize,
    pub hampel_nsigma: f64,
    pub ma_window: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            hampel_window: 11,
            hampel_nsigma: 3.0,
            ma_window: 5,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.hampel_window < 3 || self.hampel_window % 2 == 0 {
            return Err(PreprocessError::InvalidConfig(
                "hampel_window must be odd and >= 3".into(),
            ));
        }
        if self.ma_window < 1 {
            return Err(PreprocessError::InvalidConfig("ma_window must be >= 1".into()));
        }
        if !(self.hampel_nsigma >= 0.0) {
            return Err(PreprocessError::InvalidConfig(
                "hampel_nsigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Centered window bounds `[lo, hi)` around `i`, truncated at the edges.
fn window_bounds(i: usize, len: usize, left: usize, right: usize) -> (usize, usize) {
    (i.saturating_sub(left), (i + right + 1).min(len))
}

/// Replaces samples that deviate from their window median by more than
/// `nsigma` scaled MADs with that median.
pub fn hampel_filter(series: &[f64], window: usize, nsigma: f64) -> Result<Vec<f64>, PreprocessError> {
    if window < 3 || window % 2 == 0 {
        return Err(PreprocessError::InvalidConfig(
            "hampel window must be odd and >= 3".into(),
        ));
    }
    if series.len() < window {
        return Err(PreprocessError::SeriesTooShort {
            len: series.len(),
            window,
        });
    }
    let half = window / 2;
    let mut sorted: Vec<f64> = Vec::with_capacity(window);
    let (mut cur_lo, mut cur_hi) = (0, 0);
    let mut out = series.to_vec();
    for i in 0..series.len() {
        let (lo, hi) = window_bounds(i, series.len(), half, half);
        while cur_hi < hi {
            let v = series[cur_hi];
            let at = sorted.partition_point(|x| x.total_cmp(&v).is_lt());
            sorted.insert(at, v);
            cur_hi += 1;
        }
        while cur_lo < lo {
            let v = series[cur_lo];
            let at = sorted.partition_point(|x| x.total_cmp(&v).is_lt());
            sorted.remove(at);
            cur_lo += 1;
        }
        let med = sorted_median(&sorted);
        let mad = median_abs_deviation(&sorted, med);
        if (series[i] - med).abs() > nsigma * MAD_SCALE * mad {
            out[i] = med;
        }
    }
    Ok(out)
}

fn sorted_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median of `|x - med|` over a sorted window, by merging the two
/// monotone halves around `med`.
fn median_abs_deviation(sorted: &[f64], med: f64) -> f64 {
    let n = sorted.len();
    let split = sorted.partition_point(|&x| x < med);
    let (mut l, mut r) = (split, split);
    let mut prev = 0.0;
    for k in 0..=n / 2 {
        let take_left = r >= n || (l > 0 && med - sorted[l - 1] <= sorted[r] - med);
        let d = if take_left {
            l -= 1;
            (sorted[l] - med).abs()
        } else {
            r += 1;
            (sorted[r - 1] - med).abs()
        };
        if k == n / 2 {
            return if n % 2 == 1 { d } else { 0.5 * (prev + d) };
        }
        prev = d;
    }
    unreachable!("window is never empty")
}

/// Centered moving mean; edge windows are truncated rather than padded.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>, PreprocessError> {
    if window < 1 {
        return Err(PreprocessError::InvalidConfig("window must be >= 1".into()));
    }
    if series.len() < window {
        return Err(PreprocessError::SeriesTooShort {
            len: series.len(),
            window,
        });
    }
    let left = (window - 1) / 2;
    let right = window / 2;
    Ok((0..series.len())
        .map(|i| {
            let (lo, hi) = window_bounds(i, series.len(), left, right);
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub scores: Vec<f64>,
    pub loading: Vec<f64>,
    pub eigenvalue: f64,
    pub explained_ratio: f64,
    /// Set when the input had zero covariance; scores are then all zero and
    /// the loading is uniform.
    pub degenerate: bool,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix stored row-major.
/// Returns eigenvalues and eigenvectors (column `k` of the returned matrix is
/// the eigenvector of eigenvalue `k`).
pub(crate) fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[i * n + i]).collect();
    (eig, v)
}

/// First principal component of an `n x d` row-major matrix.
///
/// The loading is the unit eigenvector of the sample covariance with the
/// largest eigenvalue, signed so its largest-magnitude entry is positive.
pub fn pca_first_component(rows: &[f64], d: usize) -> Result<PcaResult, PreprocessError> {
    assert!(d > 0 && rows.len() % d == 0, "matrix shape mismatch");
    let n = rows.len() / d;
    if n < 2 {
        return Err(PreprocessError::TooFewRows(n));
    }
    if rows.iter().any(|x| !x.is_finite()) {
        return Err(PreprocessError::NonFinite);
    }
    let mut mean = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let cov_row = &mut cov[i * d..(i + 1) * d];
            for (cv, cj) in cov_row[i..].iter_mut().zip(&centered[i..]) {
                *cv += ci * cj;
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total <= 0.0 {
        return Ok(PcaResult {
            scores: vec![0.0; n],
            loading: vec![1.0 / (d as f64).sqrt(); d],
            eigenvalue: 0.0,
            explained_ratio: 0.0,
            degenerate: true,
        });
    }

    let (eig, vecs) = jacobi_eigen(&cov, d);
    let top = (0..d)
        .max_by(|&a, &b| eig[a].total_cmp(&eig[b]))
        .expect("d > 0");
    let mut loading: Vec<f64> = (0..d).map(|k| vecs[k * d + top]).collect();
    let norm = loading.iter().map(|x| x * x).sum::<f64>().sqrt();
    for l in &mut loading {
        *l /= norm;
    }
    let pivot = (0..d)
        .max_by(|&a, &b| loading[a].abs().total_cmp(&loading[b].abs()))
        .expect("d > 0");
    if loading[pivot] < 0.0 {
        for l in &mut loading {
            *l = -*l;
        }
    }
    let scores = rows
        .chunks_exact(d)
        .map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&loading)
                .map(|((x, m), l)| (x - m) * l)
                .sum()
        })
        .collect();
    let lambda = eig[top].max(0.0);
    Ok(PcaResult {
        scores,
        loading,
        eigenvalue: lambda,
        explained_ratio: (lambda / total).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Hampel + moving average on every subcarrier, returned as an `n x 30`
/// row-major matrix.
pub fn denoise_trace(trace: &CsiTrace, cfg: &DenoiseConfig) -> Result<Vec<f64>, PreprocessError> {
    cfg.validate()?;
    let n = trace.len();
    let mut matrix = vec![0.0; n * NUM_SUBCARRIERS];
    for k in 0..NUM_SUBCARRIERS {
        let raw = trace.subcarrier(k);
        let cleaned = hampel_filter(&raw, cfg.hampel_window, cfg.hampel_nsigma)?;
        let smooth = moving_average(&cleaned, cfg.ma_window)?;
        for (i, v) in smooth.into_iter().enumerate() {
            matrix[i * NUM_SUBCARRIERS + k] = v;
        }
    }
    Ok(matrix)
}

/// Full chain: denoise every subcarrier, then project onto PC1.
pub fn preprocess_trace(trace: &CsiTrace, cfg: &DenoiseConfig) -> Result<PcaResult, PreprocessError> {
    let matrix = denoise_trace(trace, cfg)?;
    pca_first_component(&matrix, NUM_SUBCARRIERS)
}
