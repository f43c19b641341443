//! Classification metrics over integer class labels.

use super::NnError;

fn check_lengths(preds: &[usize], truth: &[usize]) -> Result<(), NnError> {
    if preds.len() != truth.len() {
        return Err(NnError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(NnError::EmptyInput);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64, NnError> {
    check_lengths(preds, truth)?;
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `matrix[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(
    preds: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>, NnError> {
    check_lengths(preds, truth)?;
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(NnError::UnknownLabel(p.max(t)));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1 over the classes present in `truth`.
/// A class whose precision and recall denominators are both empty scores 0.
pub fn macro_f1(preds: &[usize], truth: &[usize], num_classes: usize) -> Result<f64, NnError> {
    let m = confusion_matrix(preds, truth, num_classes)?;
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        let support: usize = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        present += 1;
        let tp = m[c][c] as f64;
        let predicted: usize = (0..num_classes).map(|t| m[t][c]).sum();
        let denom = predicted as f64 + support as f64;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    Ok(total / present as f64)
}
