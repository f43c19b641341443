//! Mini-batch Adam training, cross-entropy loss and gradient checking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax, softmax, CnnModel, Grads};
use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Learning rate of the output layer; `None` uses `lr`.
    #[serde(default)]
    pub head_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
            head_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(NnError::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || self.head_lr.is_some_and(|h| !(h > 0.0)) {
            return Err(NnError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Option<Vec<f64>>,
}

struct Adam {
    m: Grads,
    v: Grads,
    step: i32,
}

impl Adam {
    fn new(model: &CnnModel) -> Self {
        Adam {
            m: Grads::zeros_like(model),
            v: Grads::zeros_like(model),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut CnnModel, grads: &Grads, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let last = model.num_layers() - 1;
        for l in 0..=last {
            if model.layer_frozen(l) {
                continue;
            }
            let lr = match cfg.head_lr {
                Some(h) if l == last => h,
                _ => cfg.lr,
            };
            let (w, b) = model.layer_params_mut(l);
            let pairs = [
                (w, &grads.weights[l], &mut self.m.weights[l], &mut self.v.weights[l]),
                (b, &grads.biases[l], &mut self.m.biases[l], &mut self.v.biases[l]),
            ];
            for (p, g, m, v) in pairs {
                for i in 0..p.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// Mean cross-entropy of a batch and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>, usize) {
    let batch = labels.len();
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let p = softmax(row);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        if argmax(&p) == y {
            correct += 1;
        }
        for (k, pk) in p.iter().enumerate() {
            let t = if k == y { 1.0 } else { 0.0 };
            dlogits[b * classes + k] = (pk - t) / batch as f64;
        }
    }
    (loss / batch as f64, dlogits, correct)
}

fn validate_data(model: &CnnModel, data: &[(&[f64], usize)]) -> Result<(), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let classes = model.num_outputs();
    for (x, y) in data {
        if *y >= classes {
            return Err(NnError::UnknownLabel(*y));
        }
        if x.len() != model.input_len() {
            return Err(NnError::ShapeMismatch {
                expected: model.input_len(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
    }
    Ok(())
}

/// Activations entering layer `start` for every sample, computed once
/// because every layer below `start` is frozen.
fn frozen_prefix(model: &CnnModel, data: &[(&[f64], usize)], start: usize) -> Vec<Vec<f64>> {
    let inputs: Vec<&[f64]> = data.iter().map(|(x, _)| *x).collect();
    model.activations_at(start, &inputs)
}

/// Trains all non-frozen layers. Deterministic given `(model, data, cfg)`.
pub fn train(
    model: &CnnModel,
    data: &[(&[f64], usize)],
    cfg: &TrainConfig,
) -> Result<(CnnModel, TrainHistory), NnError> {
    train_with_validation(model, data, None, cfg)
}

pub fn train_with_validation(
    model: &CnnModel,
    data: &[(&[f64], usize)],
    validation: Option<&[(&[f64], usize)]>,
    cfg: &TrainConfig,
) -> Result<(CnnModel, TrainHistory), NnError> {
    cfg.validate()?;
    validate_data(model, data)?;
    let mut model = model.clone();
    let nl = model.num_layers();
    let mut history = TrainHistory {
        val_accuracy: validation.map(|_| Vec::new()),
        ..Default::default()
    };
    let Some(start) = (0..nl).find(|&l| !model.layer_frozen(l)) else {
        // nothing to train
        for _ in 0..cfg.epochs {
            let (loss, acc) = evaluate_loss(&model, data)?;
            history.loss.push(loss);
            history.train_accuracy.push(acc);
            if let (Some(v), Some(h)) = (validation, history.val_accuracy.as_mut()) {
                h.push(evaluate_loss(&model, v)?.1);
            }
        }
        return Ok((model, history));
    };

    let inputs = frozen_prefix(&model, data, start);
    let in_size = model.layer_input_size(start);
    let classes = model.num_outputs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = Grads::zeros_like(&model);
    let mut adam = Adam::new(&model);
    let mut batch_in = Vec::with_capacity(cfg.batch_size * in_size);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            batch_in.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_in.extend_from_slice(&inputs[i]);
                batch_labels.push(data[i].1);
            }
            let cache = model.forward_batch(start, &batch_in, chunk.len());
            let (loss, dlogits, ok) = cross_entropy(cache.logits(), &batch_labels, classes);
            if !loss.is_finite() {
                return Err(NnError::Diverged);
            }
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            grads.clear();
            model.backward_batch(&cache, &dlogits, &mut grads);
            adam.update(&mut model, &grads, cfg);
        }
        history.loss.push(loss_sum / data.len() as f64);
        history
            .train_accuracy
            .push(correct as f64 / data.len() as f64);
        if let (Some(v), Some(h)) = (validation, history.val_accuracy.as_mut()) {
            h.push(evaluate_loss(&model, v)?.1);
        }
    }
    Ok((model, history))
}

/// Mean cross-entropy and accuracy of `model` on `data`.
pub fn evaluate_loss(model: &CnnModel, data: &[(&[f64], usize)]) -> Result<(f64, f64), NnError> {
    validate_data(model, data)?;
    let inputs: Vec<&[f64]> = data.iter().map(|(x, _)| *x).collect();
    let outputs = model.forward_many(&inputs)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (out, (_, y)) in outputs.iter().zip(data) {
        loss -= out.probs[*y].max(f64::MIN_POSITIVE).ln();
        if argmax(&out.probs) == *y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn sample_loss(model: &CnnModel, x: &[f64], y: usize) -> f64 {
    let cache = model.forward_batch(0, x, 1);
    let p = softmax(cache.logits());
    -p[y].ln()
}

/// Largest relative error between backprop gradients and central finite
/// differences over `count` randomly chosen trainable parameters.
pub fn grad_check(
    model: &CnnModel,
    x: &[f64],
    y: usize,
    epsilon: f64,
    count: usize,
    seed: u64,
) -> Result<f64, NnError> {
    validate_data(model, &[(x, y)])?;
    let cache = model.forward_batch(0, x, 1);
    let (_, dlogits, _) = cross_entropy(cache.logits(), &[y], model.num_outputs());
    let mut grads = Grads::zeros_like(model);
    model.backward_batch(&cache, &dlogits, &mut grads);

    // (layer, is_bias, index) of every trainable parameter
    let mut pool = Vec::new();
    for l in 0..model.num_layers() {
        if model.layer_frozen(l) {
            continue;
        }
        let (w, b) = model.layer_params(l);
        pool.extend((0..w.len()).map(|i| (l, false, i)));
        pool.extend((0..b.len()).map(|i| (l, true, i)));
    }
    if pool.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (l, is_bias, i) = pool[rng.random_range(0..pool.len())];
        let analytic = if is_bias {
            grads.biases[l][i]
        } else {
            grads.weights[l][i]
        };
        let original = {
            let (w, b) = probe.layer_params(l);
            if is_bias { b[i] } else { w[i] }
        };
        let set = |m: &mut CnnModel, v: f64| {
            let (w, b) = m.layer_params_mut(l);
            if is_bias {
                b[i] = v;
            } else {
                w[i] = v;
            }
        };
        set(&mut probe, original + epsilon);
        let plus = sample_loss(&probe, x, y);
        set(&mut probe, original - epsilon);
        let minus = sample_loss(&probe, x, y);
        set(&mut probe, original);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FEATURE_LEN;

    fn separable(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = i % 2;
                let x: Vec<f64> = (0..FEATURE_LEN)
                    .map(|k| {
                        let signal = if (k < 192) == (y == 0) { 1.0 } else { -1.0 };
                        signal + 0.3 * (rng.random::<f64>() - 0.5)
                    })
                    .collect();
                (x, if y == 0 { 1 } else { 3 })
            })
            .collect()
    }

    fn refs(d: &[(Vec<f64>, usize)]) -> Vec<(&[f64], usize)> {
        d.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
    }

    #[test]
    fn learns_separable_fixture() {
        let data = separable(200, 1);
        let cfg = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let (m, h) = train(&CnnModel::new(1), &refs(&data), &cfg).unwrap();
        assert_eq!(h.loss.len(), 10);
        assert!(h.loss.iter().all(|l| l.is_finite()));
        assert!(evaluate_loss(&m, &refs(&data)).unwrap().1 >= 0.99);
    }

    #[test]
    fn all_frozen_model_is_untouched() {
        let data = separable(20, 2);
        let mut m = CnnModel::new(2);
        for l in 0..m.num_layers() {
            m.set_frozen(l, true);
        }
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let (out, h) = train(&m, &refs(&data), &cfg).unwrap();
        assert_eq!(out, m);
        assert_eq!(h.loss.len(), 2);
    }

    #[test]
    fn frozen_convs_stay_bitwise_constant() {
        let data = separable(40, 3);
        let mut m = CnnModel::new(3);
        m.freeze_convs();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let (out, _) = train(&m, &refs(&data), &cfg).unwrap();
        assert_eq!(out.conv_param_bytes(), m.conv_param_bytes());
        assert_ne!(out.dense[0].weight, m.dense[0].weight);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(50, 4);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            ..Default::default()
        };
        let a = train(&CnnModel::new(4), &refs(&data), &cfg).unwrap();
        let b = train(&CnnModel::new(4), &refs(&data), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_are_reported() {
        let m = CnnModel::new(0);
        let cfg = TrainConfig::default();
        assert_eq!(train(&m, &[], &cfg).unwrap_err(), NnError::EmptyDataset);
        let x = vec![0.0; FEATURE_LEN];
        assert_eq!(
            train(&m, &[(&x, 7)], &cfg).unwrap_err(),
            NnError::UnknownLabel(7)
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = CnnModel::new(5);
        let x: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let err = grad_check(&m, &x, 2, 1e-5, 100, 5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_skips_frozen_layers() {
        let mut m = CnnModel::new(6);
        m.freeze_convs();
        m.set_frozen(3, true);
        let x = vec![0.5; FEATURE_LEN];
        let err = grad_check(&m, &x, 0, 1e-5, 50, 1).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
