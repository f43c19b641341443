//! One-vs-one support vector classifier trained with SMO.
//!
//! Each class pair gets its own binary machine. The dual is solved with
//! second-order working-set selection until the maximal KKT violation drops
//! below `tol`. Inputs are standardized with statistics frozen at train time.

use serde::{Deserialize, Serialize};

use super::{check_training_set, vote_label, ClassicalError, Standardizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    /// RBF with `gamma = 1 / (d * mean feature variance)` of the
    /// standardized training data.
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub kernel: KernelKind,
    /// KKT tolerance.
    pub tol: f64,
    /// A pass is `n` pair updates for an `n`-sample binary problem.
    pub max_passes: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            kernel: KernelKind::Linear,
            tol: 1e-3,
            max_passes: 10_000,
        }
    }
}

/// Binary machine separating `positive` (+1) from `negative` (-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMachine {
    pub positive: usize,
    pub negative: usize,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Largest KKT violation over the training points at termination.
    pub kkt_violation: f64,
}

impl BinaryMachine {
    pub fn decision(&self, kernel: &Kernel, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coef)
            .map(|(sv, c)| c * kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }

    /// Primal weight vector; meaningful for the linear kernel only.
    pub fn primal_weights(&self) -> Vec<f64> {
        let dim = self.support_vectors.first().map_or(0, Vec::len);
        let mut w = vec![0.0; dim];
        for (sv, c) in self.support_vectors.iter().zip(&self.dual_coef) {
            for (wi, s) in w.iter_mut().zip(sv) {
                *wi += c * s;
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub num_classes: usize,
    pub c: f64,
    pub kernel: Kernel,
    pub standardizer: Standardizer,
    pub machines: Vec<BinaryMachine>,
}

/// Dual solution of one binary problem.
struct DualSolution {
    alpha: Vec<f64>,
    rho: f64,
    iterations: usize,
}

/// Solves `min 1/2 a'Qa - e'a` s.t. `0 <= a <= C`, `y'a = 0` with
/// second-order working set selection.
fn solve_dual(
    kmat: &[f64],
    y: &[f64],
    c: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DualSolution, usize> {
    const TAU: f64 = 1e-12;
    let n = y.len();
    let k = |i: usize, j: usize| kmat[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iter = 0;
    loop {
        // i: maximal violator in I_up
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j_sel = None;
        let mut best_obj = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                if !in_low(alpha[t], y[t]) {
                    continue;
                }
                let v = -y[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let a = (k(i, i) + k(t, t) - 2.0 * k(i, t)).max(TAU);
                    let obj = -(b * b) / a;
                    if obj < best_obj {
                        best_obj = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else {
            break;
        };
        if gmax - gmin < tol {
            break;
        }
        if iter >= max_iter {
            return Err(iter);
        }
        iter += 1;

        let (yi, yj) = (y[i], y[j]);
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        let quad = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(TAU);
        if yi != yj {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (dai, daj) = (alpha[i] - old_ai, alpha[j] - old_aj);
        for t in 0..n {
            grad[t] += y[t] * (yi * k(t, i) * dai + yj * k(t, j) * daj);
        }
    }

    // rho from free vectors, else the midpoint of the feasible range
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        0.5 * (ub + lb)
    };
    Ok(DualSolution {
        alpha,
        rho,
        iterations: iter,
    })
}

/// Largest violation of the soft-margin KKT conditions.
fn kkt_violation(kmat: &[f64], y: &[f64], alpha: &[f64], bias: f64, c: f64) -> f64 {
    let n = y.len();
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let f: f64 = (0..n).map(|s| alpha[s] * y[s] * kmat[t * n + s]).sum::<f64>() + bias;
        let margin = y[t] * f;
        let v = if alpha[t] <= 0.0 {
            (1.0 - margin).max(0.0)
        } else if alpha[t] >= c {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

pub fn svm_train(
    features: &[&[f64]],
    labels: &[usize],
    num_classes: usize,
    cfg: &SvmConfig,
) -> Result<SvmModel, ClassicalError> {
    let present = check_training_set(features, labels, num_classes)?;
    if !(cfg.c > 0.0) || !(cfg.tol > 0.0) {
        return Err(ClassicalError::InvalidConfig(
            "C and tol must be positive".into(),
        ));
    }
    let standardizer = Standardizer::fit(features);
    let xs: Vec<Vec<f64>> = features.iter().map(|x| standardizer.apply(x)).collect();
    let dim = xs[0].len();
    let kernel = match cfg.kernel {
        KernelKind::Linear => Kernel::Linear,
        KernelKind::Rbf => {
            let n = xs.len() as f64;
            let mean_var = (0..dim)
                .map(|k| {
                    let m = xs.iter().map(|x| x[k]).sum::<f64>() / n;
                    xs.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / n
                })
                .sum::<f64>()
                / dim as f64;
            let denom = dim as f64 * mean_var;
            Kernel::Rbf {
                gamma: if denom > 0.0 { 1.0 / denom } else { 1.0 },
            }
        }
    };

    let mut machines = Vec::new();
    for (pi, &pos) in present.iter().enumerate() {
        for &neg in &present[pi + 1..] {
            let idx: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i] == pos || labels[i] == neg)
                .collect();
            let y: Vec<f64> = idx
                .iter()
                .map(|&i| if labels[i] == pos { 1.0 } else { -1.0 })
                .collect();
            let n = idx.len();
            let mut kmat = vec![0.0; n * n];
            for a in 0..n {
                for b in a..n {
                    let v = kernel.eval(&xs[idx[a]], &xs[idx[b]]);
                    kmat[a * n + b] = v;
                    kmat[b * n + a] = v;
                }
            }
            let max_iter = cfg.max_passes.saturating_mul(n.max(1));
            let sol = solve_dual(&kmat, &y, cfg.c, cfg.tol, max_iter).map_err(|iterations| {
                ClassicalError::NoConvergence {
                    pair: (pos, neg),
                    iterations,
                }
            })?;
            let bias = -sol.rho;
            let violation = kkt_violation(&kmat, &y, &sol.alpha, bias, cfg.c);
            let mut support_vectors = Vec::new();
            let mut dual_coef = Vec::new();
            for (a, &i) in idx.iter().enumerate() {
                if sol.alpha[a] > 0.0 {
                    support_vectors.push(xs[i].clone());
                    dual_coef.push(sol.alpha[a] * y[a]);
                }
            }
            machines.push(BinaryMachine {
                positive: pos,
                negative: neg,
                support_vectors,
                dual_coef,
                bias,
                iterations: sol.iterations,
                kkt_violation: violation,
            });
        }
    }
    Ok(SvmModel {
        num_classes,
        c: cfg.c,
        kernel,
        standardizer,
        machines,
    })
}

impl SvmModel {
    /// Pairwise votes per class.
    pub fn votes(&self, x: &[f64]) -> Vec<usize> {
        let z = self.standardizer.apply(x);
        let mut votes = vec![0usize; self.num_classes];
        for m in &self.machines {
            if m.decision(&self.kernel, &z) > 0.0 {
                votes[m.positive] += 1;
            } else {
                votes[m.negative] += 1;
            }
        }
        votes
    }

    /// Majority vote (ties to the lowest class index) and vote fractions.
    pub fn predict(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let votes = self.votes(x);
        let total: usize = votes.iter().sum();
        let probs = if total == 0 {
            vec![1.0 / self.num_classes as f64; self.num_classes]
        } else {
            votes.iter().map(|&v| v as f64 / total as f64).collect()
        };
        (vote_label(&votes), probs)
    }
}
