//! 1D CNN layers, batched forward/backward passes and the model container.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::features::FEATURE_LEN;

pub const NUM_CLASSES: usize = 5;
pub const FEATURE_DIM: usize = 128;
const EVAL_BATCH: usize = 64;

/// Strided matrix operand: `(data, row_stride, col_stride)`.
type MatRef<'a> = (&'a [f64], usize, usize);

/// `C = A B + beta C` for an `m x k` times `k x n` product with arbitrary
/// strides. Single-threaded with a fixed accumulation order.
fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64], rsc: usize) {
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= extent(m, k, a.1, a.2), "gemm: A out of bounds");
    assert!(b.0.len() >= extent(k, n, b.1, b.2), "gemm: B out of bounds");
    assert!(c.len() >= extent(m, n, rsc, 1), "gemm: C out of bounds");
    // SAFETY: every index touched lies within the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Strided 1D convolution with TF-style "same" padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub pad_left: usize,
    /// `[out_ch][in_ch][kernel]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl Conv1d {
    fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, in_len: usize) -> Self {
        let out_len = in_len.div_ceil(stride);
        let pad_total = ((out_len - 1) * stride + kernel).saturating_sub(in_len);
        Conv1d {
            in_ch,
            out_ch,
            kernel,
            stride,
            in_len,
            out_len,
            pad_left: pad_total / 2,
            weight: vec![0.0; out_ch * in_ch * kernel],
            bias: vec![0.0; out_ch],
            frozen: false,
        }
    }

    pub fn input_size(&self) -> usize {
        self.in_ch * self.in_len
    }

    pub fn output_size(&self) -> usize {
        self.out_ch * self.out_len
    }

    fn col_size(&self) -> usize {
        self.in_ch * self.kernel * self.out_len
    }

    fn fan_in(&self) -> usize {
        self.in_ch * self.kernel
    }

    /// Unrolls one sample into `[in_ch * kernel][out_len]`.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        for i in 0..self.in_ch {
            let xi = &x[i * self.in_len..(i + 1) * self.in_len];
            for kk in 0..self.kernel {
                let row = &mut col[(i * self.kernel + kk) * self.out_len..][..self.out_len];
                for (t, c) in row.iter_mut().enumerate() {
                    let pos = (t * self.stride + kk) as isize - self.pad_left as isize;
                    *c = if pos >= 0 && (pos as usize) < self.in_len {
                        xi[pos as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    fn forward_sample(&self, x: &[f64], col: &mut [f64], y: &mut [f64]) {
        self.im2col(x, col);
        let ck = self.in_ch * self.kernel;
        let ol = self.out_len;
        for o in 0..self.out_ch {
            y[o * ol..(o + 1) * ol].fill(self.bias[o]);
        }
        gemm(self.out_ch, ck, ol, (&self.weight, ck, 1), (col, ol, 1), 1.0, y, ol);
    }

    fn backward_sample(
        &self,
        col: &[f64],
        dy: &[f64],
        grad: Option<(&mut [f64], &mut [f64])>,
        dx: Option<&mut [f64]>,
        dcol: &mut [f64],
    ) {
        let ck = self.in_ch * self.kernel;
        let ol = self.out_len;
        if let Some((gw, gb)) = grad {
            for o in 0..self.out_ch {
                gb[o] += dy[o * ol..(o + 1) * ol].iter().sum::<f64>();
            }
            gemm(self.out_ch, ol, ck, (dy, ol, 1), (col, 1, ol), 1.0, gw, ck);
        }
        if let Some(dx) = dx {
            gemm(ck, self.out_ch, ol, (&self.weight, 1, ck), (dy, ol, 1), 0.0, dcol, ol);
            for i in 0..self.in_ch {
                let dxi = &mut dx[i * self.in_len..(i + 1) * self.in_len];
                for kk in 0..self.kernel {
                    let row = &dcol[(i * self.kernel + kk) * ol..][..ol];
                    for (t, &g) in row.iter().enumerate() {
                        let pos = (t * self.stride + kk) as isize - self.pad_left as isize;
                        if pos >= 0 && (pos as usize) < self.in_len {
                            dxi[pos as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs][inputs]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl Dense {
    fn new(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            frozen: false,
        }
    }

    fn forward_batch(&self, x: &[f64], y: &mut [f64], batch: usize) {
        let (ni, no) = (self.inputs, self.outputs);
        for row in y[..batch * no].chunks_exact_mut(no) {
            row.copy_from_slice(&self.bias);
        }
        gemm(batch, ni, no, (x, ni, 1), (&self.weight, 1, ni), 1.0, y, no);
    }

    fn backward_batch(
        &self,
        x: &[f64],
        dy: &[f64],
        batch: usize,
        grad: Option<(&mut [f64], &mut [f64])>,
        dx: Option<&mut [f64]>,
    ) {
        let (ni, no) = (self.inputs, self.outputs);
        if let Some((gw, gb)) = grad {
            for row in dy[..batch * no].chunks_exact(no) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            gemm(no, batch, ni, (dy, 1, no), (x, ni, 1), 1.0, gw, ni);
        }
        if let Some(dx) = dx {
            gemm(batch, no, ni, (dy, no, 1), (&self.weight, ni, 1), 0.0, dx, ni);
        }
    }
}

/// Convolutional trunk, the feature layer (first dense layer) and a dense
/// head. ReLU follows every layer except the last, which feeds a softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub convs: Vec<Conv1d>,
    pub dense: Vec<Dense>,
    pub seed: u64,
}

/// Output of a single-sample forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub fc1_act: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn he_fill(values: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    for v in values {
        *v = normal.sample(rng);
    }
}

impl CnnModel {
    /// The 6-layer architecture: 3 stride-2 convolutions (16x7, 32x5, 64x3)
    /// followed by dense 3072->128->64->5. He-normal weights, zero biases.
    pub fn new(seed: u64) -> Self {
        let c1 = Conv1d::new(1, 16, 7, 2, FEATURE_LEN);
        let c2 = Conv1d::new(16, 32, 5, 2, c1.out_len);
        let c3 = Conv1d::new(32, 64, 3, 2, c2.out_len);
        let flat = c3.output_size();
        let mut model = CnnModel {
            convs: vec![c1, c2, c3],
            dense: vec![
                Dense::new(flat, FEATURE_DIM),
                Dense::new(FEATURE_DIM, 64),
                Dense::new(64, NUM_CLASSES),
            ],
            seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut model.convs {
            let fan = c.fan_in();
            he_fill(&mut c.weight, fan, &mut rng);
        }
        for d in &mut model.dense {
            let fan = d.inputs;
            he_fill(&mut d.weight, fan, &mut rng);
        }
        model
    }

    /// Drops every dense layer after the feature layer and attaches a fresh
    /// seeded `128 -> classes` layer.
    pub fn with_fresh_head(&self, seed: u64, classes: usize) -> Self {
        let mut model = self.clone();
        model.dense.truncate(1);
        let mut head = Dense::new(FEATURE_DIM, classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        he_fill(&mut head.weight, FEATURE_DIM, &mut rng);
        model.dense.push(head);
        model
    }

    pub fn num_layers(&self) -> usize {
        self.convs.len() + self.dense.len()
    }

    pub fn input_len(&self) -> usize {
        self.layer_input_size(0)
    }

    pub fn num_outputs(&self) -> usize {
        self.dense.last().map_or(0, |d| d.outputs)
    }

    pub fn layer_frozen(&self, l: usize) -> bool {
        if l < self.convs.len() {
            self.convs[l].frozen
        } else {
            self.dense[l - self.convs.len()].frozen
        }
    }

    pub fn set_frozen(&mut self, l: usize, frozen: bool) {
        let nc = self.convs.len();
        if l < nc {
            self.convs[l].frozen = frozen;
        } else {
            self.dense[l - nc].frozen = frozen;
        }
    }

    pub fn freeze_convs(&mut self) {
        for c in &mut self.convs {
            c.frozen = true;
        }
    }

    /// Flat input size of layer `l`.
    pub fn layer_input_size(&self, l: usize) -> usize {
        let nc = self.convs.len();
        if l < nc {
            self.convs[l].input_size()
        } else {
            self.dense[l - nc].inputs
        }
    }

    pub fn layer_output_size(&self, l: usize) -> usize {
        let nc = self.convs.len();
        if l < nc {
            self.convs[l].output_size()
        } else {
            self.dense[l - nc].outputs
        }
    }

    /// `(weight, bias)` slices of layer `l`.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let nc = self.convs.len();
        if l < nc {
            (&self.convs[l].weight, &self.convs[l].bias)
        } else {
            (&self.dense[l - nc].weight, &self.dense[l - nc].bias)
        }
    }

    pub fn layer_params_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let nc = self.convs.len();
        if l < nc {
            let c = &mut self.convs[l];
            (&mut c.weight, &mut c.bias)
        } else {
            let d = &mut self.dense[l - nc];
            (&mut d.weight, &mut d.bias)
        }
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_layers())
            .map(|l| {
                let (w, b) = self.layer_params(l);
                w.len() + b.len()
            })
            .sum()
    }

    /// Concatenated convolution weights and biases, in layer order.
    pub fn conv_param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in &self.convs {
            for v in c.weight.iter().chain(&c.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_len() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_len(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput, NnError> {
        self.check_input(x)?;
        let cache = self.forward_batch(0, x, 1);
        let logits = cache.logits().to_vec();
        let fc1_act = cache.acts[self.convs.len() + 1].clone();
        Ok(ForwardOutput {
            probs: softmax(&logits),
            logits,
            fc1_act,
        })
    }

    /// Post-ReLU activations of the feature layer.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(x)?.fc1_act)
    }

    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>), NnError> {
        let out = self.forward(x)?;
        Ok((argmax(&out.probs), out.probs))
    }

    /// Batched [`forward`](Self::forward) over many inputs.
    pub fn forward_many(&self, inputs: &[&[f64]]) -> Result<Vec<ForwardOutput>, NnError> {
        for x in inputs {
            self.check_input(x)?;
        }
        let fc1 = self.convs.len() + 1;
        let mut out = Vec::with_capacity(inputs.len());
        let mut buf = Vec::new();
        for chunk in inputs.chunks(EVAL_BATCH) {
            buf.clear();
            for x in chunk {
                buf.extend_from_slice(x);
            }
            let cache = self.forward_batch(0, &buf, chunk.len());
            let classes = self.num_outputs();
            let feat = self.layer_input_size(fc1);
            for b in 0..chunk.len() {
                let logits = cache.logits()[b * classes..(b + 1) * classes].to_vec();
                out.push(ForwardOutput {
                    probs: softmax(&logits),
                    logits,
                    fc1_act: cache.acts[fc1][b * feat..(b + 1) * feat].to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Inputs to layer `layer` for every sample, computed in batches.
    pub(crate) fn activations_at(&self, layer: usize, inputs: &[&[f64]]) -> Vec<Vec<f64>> {
        if layer == 0 {
            return inputs.iter().map(|x| x.to_vec()).collect();
        }
        let size = self.layer_input_size(layer);
        let mut out = Vec::with_capacity(inputs.len());
        let mut buf = Vec::new();
        let mut probe = self.clone();
        // stop the pass at `layer`
        probe.truncate_layers(layer);
        for chunk in inputs.chunks(EVAL_BATCH) {
            buf.clear();
            for x in chunk {
                buf.extend_from_slice(x);
            }
            let cache = probe.forward_batch_raw(&buf, chunk.len());
            for b in 0..chunk.len() {
                out.push(cache[b * size..(b + 1) * size].to_vec());
            }
        }
        out
    }

    fn truncate_layers(&mut self, layers: usize) {
        let nc = self.convs.len();
        if layers <= nc {
            self.convs.truncate(layers);
            self.dense.clear();
        } else {
            self.dense.truncate(layers - nc);
        }
    }

    /// Output of the last layer with ReLU applied, for prefix models.
    fn forward_batch_raw(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let nl = self.num_layers();
        let nc = self.convs.len();
        let mut x = input[..batch * self.layer_input_size(0)].to_vec();
        for l in 0..nl {
            let out_size = self.layer_output_size(l);
            let mut y = vec![0.0; batch * out_size];
            if l < nc {
                let conv = &self.convs[l];
                let (in_size, col_size) = (conv.input_size(), conv.col_size());
                let mut col = vec![0.0; col_size];
                for b in 0..batch {
                    conv.forward_sample(
                        &x[b * in_size..(b + 1) * in_size],
                        &mut col,
                        &mut y[b * out_size..(b + 1) * out_size],
                    );
                }
            } else {
                self.dense[l - nc].forward_batch(&x, &mut y, batch);
            }
            for v in &mut y {
                *v = v.max(0.0);
            }
            x = y;
        }
        x
    }

    /// Runs layers `start..` on a batch whose flattened inputs to layer
    /// `start` are concatenated in `input`.
    pub(crate) fn forward_batch(&self, start: usize, input: &[f64], batch: usize) -> BatchCache {
        let nl = self.num_layers();
        let nc = self.convs.len();
        let mut acts = vec![Vec::new(); nl + 1];
        let mut cols = vec![Vec::new(); nc];
        acts[start] = input[..batch * self.layer_input_size(start)].to_vec();
        for l in start..nl {
            let out_size = self.layer_output_size(l);
            let mut y = vec![0.0; batch * out_size];
            if l < nc {
                let conv = &self.convs[l];
                let (in_size, col_size) = (conv.input_size(), conv.col_size());
                let mut col = vec![0.0; batch * col_size];
                for b in 0..batch {
                    conv.forward_sample(
                        &acts[l][b * in_size..(b + 1) * in_size],
                        &mut col[b * col_size..(b + 1) * col_size],
                        &mut y[b * out_size..(b + 1) * out_size],
                    );
                }
                cols[l] = col;
            } else {
                self.dense[l - nc].forward_batch(&acts[l], &mut y, batch);
            }
            if l + 1 < nl {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            acts[l + 1] = y;
        }
        BatchCache {
            batch,
            start,
            acts,
            cols,
        }
    }

    /// Backpropagates `dlogits` through layers `cache.start..`. Gradients of
    /// trainable layers are accumulated into `grads`; propagation stops at
    /// the lowest trainable layer.
    pub(crate) fn backward_batch(&self, cache: &BatchCache, dlogits: &[f64], grads: &mut Grads) {
        let nl = self.num_layers();
        let nc = self.convs.len();
        let batch = cache.batch;
        let lowest = (cache.start..nl).find(|&l| !self.layer_frozen(l));
        let Some(lowest) = lowest else { return };
        let mut dy = dlogits.to_vec();
        for l in (lowest..nl).rev() {
            if l + 1 < nl {
                for (g, a) in dy.iter_mut().zip(&cache.acts[l + 1]) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let need_dx = l > lowest;
            let in_size = self.layer_input_size(l);
            let mut dx = if need_dx {
                vec![0.0; batch * in_size]
            } else {
                Vec::new()
            };
            let trainable = !self.layer_frozen(l);
            let (gw, gb) = grads.layer_mut(l);
            let grad = trainable.then_some((gw, gb));
            if l < nc {
                let conv = &self.convs[l];
                let (out_size, col_size) = (conv.output_size(), conv.col_size());
                let mut dcol = vec![0.0; col_size];
                let mut grad = grad;
                for b in 0..batch {
                    let g = grad.as_mut().map(|(w, bb)| (&mut **w, &mut **bb));
                    let dxb = need_dx.then(|| &mut dx[b * in_size..(b + 1) * in_size]);
                    conv.backward_sample(
                        &cache.cols[l][b * col_size..(b + 1) * col_size],
                        &dy[b * out_size..(b + 1) * out_size],
                        g,
                        dxb,
                        &mut dcol,
                    );
                }
            } else {
                self.dense[l - nc].backward_batch(
                    &cache.acts[l],
                    &dy,
                    batch,
                    grad,
                    need_dx.then_some(&mut dx[..]),
                );
            }
            dy = dx;
        }
    }
}

pub(crate) struct BatchCache {
    pub batch: usize,
    pub start: usize,
    /// `acts[l]` is the batch input to layer `l`; the last entry holds logits.
    pub acts: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
}

impl BatchCache {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

/// Gradient buffers shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &CnnModel) -> Self {
        let (weights, biases) = (0..model.num_layers())
            .map(|l| {
                let (w, b) = model.layer_params(l);
                (vec![0.0; w.len()], vec![0.0; b.len()])
            })
            .unzip();
        Grads { weights, biases }
    }

    pub fn clear(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(0.0);
        }
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights[l], &mut self.biases[l])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn architecture_shapes() {
        let m = CnnModel::new(0);
        let lens: Vec<usize> = m.convs.iter().map(|c| c.out_len).collect();
        assert_eq!(lens, vec![192, 96, 48]);
        assert_eq!(m.dense[0].inputs, 3072);
        assert_eq!(m.num_layers(), 6);
        assert_eq!(m.num_outputs(), 5);
        assert!(m.convs.iter().all(|c| c.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(CnnModel::new(3), CnnModel::new(3));
        assert_ne!(CnnModel::new(3).convs[0].weight, CnnModel::new(4).convs[0].weight);
    }

    #[test]
    fn fresh_model_softmax_is_normalized() {
        let out = CnnModel::new(1).forward(&[0.0; FEATURE_LEN]).unwrap();
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut m = CnnModel::new(1);
        for l in 0..m.num_layers() {
            let (w, _) = m.layer_params_mut(l);
            w.fill(0.0);
        }
        let out = m.forward(&[0.3; FEATURE_LEN]).unwrap();
        assert!(out.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = [0.3, -1.2, 4.0, 0.0, 2.2];
        let shifted: Vec<f64> = l.iter().map(|v| v + 7.5).collect();
        let (a, b) = (softmax(&l), softmax(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        let m = CnnModel::new(0);
        let mut x = vec![0.0; FEATURE_LEN];
        x[5] = f64::NAN;
        assert_eq!(m.forward(&x), Err(NnError::NonFiniteInput));
        assert!(matches!(m.forward(&[0.0; 3]), Err(NnError::ShapeMismatch { .. })));
    }

    /// Straightforward per-layer evaluation with explicit index arithmetic.
    fn reference_forward(m: &CnnModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for c in &m.convs {
            let mut y = vec![0.0; c.out_ch * c.out_len];
            for o in 0..c.out_ch {
                for t in 0..c.out_len {
                    let mut s = c.bias[o];
                    for i in 0..c.in_ch {
                        for k in 0..c.kernel {
                            let pos = (t * c.stride + k) as isize - c.pad_left as isize;
                            if pos >= 0 && (pos as usize) < c.in_len {
                                s += c.weight[(o * c.in_ch + i) * c.kernel + k]
                                    * h[i * c.in_len + pos as usize];
                            }
                        }
                    }
                    y[o * c.out_len + t] = s.max(0.0);
                }
            }
            h = y;
        }
        let nd = m.dense.len();
        for (idx, d) in m.dense.iter().enumerate() {
            let mut y = vec![0.0; d.outputs];
            for (j, yj) in y.iter_mut().enumerate() {
                let mut s = d.bias[j];
                for i in 0..d.inputs {
                    s += d.weight[j * d.inputs + i] * h[i];
                }
                *yj = if idx + 1 < nd { s.max(0.0) } else { s };
            }
            h = y;
        }
        let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = h.iter().map(|v| (v - max).exp()).sum();
        h.iter().map(|v| (v - max).exp() / z).collect()
    }

    #[test]
    fn batched_forward_matches_single() {
        let m = CnnModel::new(8);
        let xs: Vec<Vec<f64>> = (0..70)
            .map(|i| (0..FEATURE_LEN).map(|k| ((i * 31 + k * 7) % 17) as f64 * 0.1).collect())
            .collect();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let many = m.forward_many(&refs).unwrap();
        for (x, out) in xs.iter().zip(&many) {
            let one = m.forward(x).unwrap();
            for (a, b) in one.probs.iter().zip(&out.probs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let acts = m.activations_at(3, &refs);
        for (a, out) in acts.iter().zip(&many) {
            assert_eq!(a.len(), 3072);
            let _ = out;
        }
        let fc1 = m.activations_at(4, &refs);
        for (a, out) in fc1.iter().zip(&many) {
            for (p, q) in a.iter().zip(&out.fc1_act) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = CnnModel::new(12);
        for l in 0..m.num_layers() {
            let (_, b) = m.layer_params_mut(l);
            b.iter_mut().for_each(|v| *v = rng.random::<f64>() * 0.1 - 0.05);
        }
        let x: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let got = m.forward(&x).unwrap().probs;
        let want = reference_forward(&m, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn fresh_head_replaces_dense_tail() {
        let m = CnnModel::new(5);
        let t = m.with_fresh_head(77, 5);
        assert_eq!(t.dense.len(), 2);
        assert_eq!(t.dense[0], m.dense[0]);
        assert_eq!((t.dense[1].inputs, t.dense[1].outputs), (128, 5));
        assert_eq!(t.convs, m.convs);
    }
}
