//! Classical heads fitted on FC1 activations: a one-vs-one SMO support
//! vector machine and a CART random forest.

mod forest;
mod svm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forest::{rf_train, RfConfig, RfModel, Tree, TreeNode};
pub use svm::{svm_train, BinaryMachine, Kernel, KernelKind, SvmConfig, SvmModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassicalError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("SMO did not converge for class pair {pair:?} after {iterations} iterations")]
    NoConvergence {
        pair: (usize, usize),
        iterations: usize,
    },
    #[error("label {label} outside 0..{num_classes}")]
    UnknownLabel { label: usize, num_classes: usize },
    #[error("feature rows have inconsistent or zero length")]
    ShapeMismatch,
    #[error("{0} features and labels")]
    LengthMismatch(String),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Per-feature affine standardization; zero-variance features get std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Standardizer {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Winner of a vote count; ties go to the lowest class index.
pub fn vote_label(votes: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = i;
        }
    }
    best
}

/// Validates a training set and returns the sorted distinct labels.
fn check_training_set(
    features: &[&[f64]],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<usize>, ClassicalError> {
    if features.is_empty() {
        return Err(ClassicalError::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(ClassicalError::LengthMismatch(format!(
            "{} vs {}",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|r| r.len() != dim) {
        return Err(ClassicalError::ShapeMismatch);
    }
    if features.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(ClassicalError::NonFinite);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(ClassicalError::UnknownLabel { label, num_classes });
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(ClassicalError::SingleClass);
    }
    Ok(present)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_handles_constant_features() {
        let rows = [[1.0, 5.0], [3.0, 5.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = Standardizer::fit(&refs);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn validation_errors() {
        let rows = [[1.0], [2.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        assert_eq!(
            check_training_set(&[], &[], 5),
            Err(ClassicalError::EmptyDataset)
        );
        assert_eq!(
            check_training_set(&refs, &[0, 0], 5),
            Err(ClassicalError::SingleClass)
        );
        assert!(matches!(
            check_training_set(&refs, &[0, 7], 5),
            Err(ClassicalError::UnknownLabel { label: 7, .. })
        ));
        assert_eq!(check_training_set(&refs, &[3, 1], 5), Ok(vec![1, 3]));
    }
}
