use proptest::prelude::*;
use widur_core::classical::{rf_train, svm_train, RfConfig, SvmConfig, SvmModel};

fn refs(xs: &[Vec<f64>]) -> Vec<&[f64]> {
    xs.iter().map(Vec::as_slice).collect()
}

/// Primal soft-margin objective.
fn primal(w: [f64; 2], b: f64, xs: &[[f64; 2]], ys: &[f64], c: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (1.0 - y * (w[0] * x[0] + w[1] * x[1] + b)).max(0.0))
        .sum();
    0.5 * (w[0] * w[0] + w[1] * w[1]) + c * hinge
}

/// Coarse-to-fine exhaustive search over (w1, w2, b).
fn grid_oracle(xs: &[[f64; 2]], ys: &[f64], c: f64) -> ([f64; 2], f64) {
    let mut center = [0.0; 3];
    let mut half = 3.0;
    for _ in 0..6 {
        let steps = 40;
        let h = 2.0 * half / steps as f64;
        let mut best = (f64::INFINITY, center);
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    let p = [
                        center[0] - half + i as f64 * h,
                        center[1] - half + j as f64 * h,
                        center[2] - half + k as f64 * h,
                    ];
                    let v = primal([p[0], p[1]], p[2], xs, ys, c);
                    if v < best.0 {
                        best = (v, p);
                    }
                }
            }
        }
        center = best.1;
        half = 4.0 * h;
    }
    ([center[0], center[1]], center[2])
}

#[test]
fn six_point_svm_matches_grid_search() {
    let raw = [[2.0, 2.0], [2.0, 3.0], [3.0, 2.0], [0.0, 0.0], [0.0, -1.0], [-1.0, 0.0]];
    let labels = [0usize, 0, 0, 1, 1, 1];
    let xs: Vec<Vec<f64>> = raw.iter().map(|p| p.to_vec()).collect();
    let model = svm_train(&refs(&xs), &labels, 5, &SvmConfig::default()).unwrap();
    assert_eq!(model.machines.len(), 1);
    let m = &model.machines[0];

    // the oracle standardizes independently with population statistics
    let n = raw.len() as f64;
    let mut z = raw;
    for k in 0..2 {
        let mean = raw.iter().map(|p| p[k]).sum::<f64>() / n;
        let sd = (raw.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for p in z.iter_mut() {
            p[k] = (p[k] - mean) / sd;
        }
    }
    let ys: Vec<f64> = labels.iter().map(|&l| if l == 0 { 1.0 } else { -1.0 }).collect();
    let (w_ref, b_ref) = grid_oracle(&z, &ys, 1.0);
    let w = m.primal_weights();
    assert!((w[0] - w_ref[0]).abs() < 1e-2, "{w:?} vs {w_ref:?}");
    assert!((w[1] - w_ref[1]).abs() < 1e-2, "{w:?} vs {w_ref:?}");
    assert!((m.bias - b_ref).abs() < 1e-2, "{} vs {b_ref}", m.bias);
}

/// Checks soft-margin KKT conditions from the outside using only the model.
fn max_kkt_violation(model: &SvmModel, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    for m in &model.machines {
        for (x, &l) in xs.iter().zip(labels) {
            if l != m.positive && l != m.negative {
                continue;
            }
            let y = if l == m.positive { 1.0 } else { -1.0 };
            let z = model.standardizer.apply(x);
            let margin = y * m.decision(&model.kernel, &z);
            let coef = m
                .support_vectors
                .iter()
                .zip(&m.dual_coef)
                .filter(|(sv, _)| **sv == z)
                .map(|(_, c)| c.abs())
                .sum::<f64>();
            let v = if coef == 0.0 {
                (1.0 - margin).max(0.0)
            } else if coef >= model.c {
                (margin - 1.0).max(0.0)
            } else {
                (margin - 1.0).abs()
            };
            worst = worst.max(v);
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn svm_satisfies_kkt(
        pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0usize..3), 6..40)
    ) {
        let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let labels: Vec<usize> = pts.iter().map(|p| p.2).collect();
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assume!(distinct.len() >= 2);
        let model = svm_train(&refs(&xs), &labels, 5, &SvmConfig::default()).unwrap();
        prop_assert!(max_kkt_violation(&model, &xs, &labels) <= 1e-3);
        for x in &xs {
            let (label, probs) = model.predict(x);
            prop_assert!(label < 5);
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn forest_probabilities_are_distributions(
        pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0usize..5), 4..40),
        seed in 0u64..1000,
    ) {
        let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let labels: Vec<usize> = pts.iter().map(|p| p.2).collect();
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assume!(distinct.len() >= 2);
        let cfg = RfConfig { n_trees: 8, ..Default::default() };
        let model = rf_train(&refs(&xs), &labels, 5, &cfg, seed).unwrap();
        for x in &xs {
            let (_, probs) = model.predict(x);
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
