//! Transfer learning: pre-train on the source domain, freeze the
//! convolutional trunk, fine-tune the feature layer under a fresh softmax
//! head on target data, then optionally fit a classical head on the
//! feature-layer activations.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classical::{rf_train, svm_train, ClassicalError, RfConfig, RfModel, SvmConfig, SvmModel};
use crate::csi_model::Label;
use crate::nn::{
    accuracy, argmax, confusion_matrix, macro_f1, train, CnnModel, NnError, TrainConfig,
    TrainHistory, NUM_CLASSES,
};

/// Version tag written into serialized heads.
pub const HEAD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TransferError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error("dataset has no samples of class {0}")]
    EmptyClass(Label),
    #[error("dataset needs at least two classes")]
    SingleClass,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("convolution parameters changed during fine-tuning")]
    FrozenViolation,
    #[error("head: {0}")]
    Head(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// The fine-tuned softmax head itself.
    None,
    Svm,
    Rf,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::None, HeadKind::Svm, HeadKind::Rf];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::None => "none",
            HeadKind::Svm => "svm",
            HeadKind::Rf => "rf",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = TransferError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(HeadKind::None),
            "svm" => Ok(HeadKind::Svm),
            "rf" => Ok(HeadKind::Rf),
            other => Err(TransferError::InvalidConfig(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Learning rate of the freshly attached softmax layer.
    pub head_lr: f64,
    pub batch_size: usize,
    pub head_kind: HeadKind,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            finetune_epochs: 15,
            finetune_lr: 1e-4,
            head_lr: 1e-3,
            batch_size: 32,
            head_kind: HeadKind::Svm,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        if self.finetune_epochs < 1 {
            return Err(TransferError::InvalidConfig(
                "finetune_epochs must be >= 1".into(),
            ));
        }
        if !(self.finetune_lr > 0.0) || !(self.head_lr > 0.0) || self.batch_size < 1 {
            return Err(TransferError::InvalidConfig(
                "learning rates and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Accuracy, macro-F1 and confusion matrix (`[truth][pred]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

impl Evaluation {
    pub fn from_predictions(preds: &[usize], truth: &[usize]) -> Result<Evaluation, NnError> {
        Ok(Evaluation {
            accuracy: accuracy(preds, truth)?,
            macro_f1: macro_f1(preds, truth, NUM_CLASSES)?,
            confusion: confusion_matrix(preds, truth, NUM_CLASSES)?,
            samples: truth.len(),
        })
    }
}

/// SHA-256 over the little-endian convolution parameters.
pub fn conv_digest(model: &CnnModel) -> String {
    hex::encode(Sha256::digest(model.conv_param_bytes()))
}

/// Seeded split keeping each class's proportion; returns
/// `(first, second)` index sets with `fraction` of every class in `first`.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let take = (idx.len() as f64 * fraction).round() as usize;
        first.extend_from_slice(&idx[..take]);
        second.extend_from_slice(&idx[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

fn pick<'a>(data: &[(&'a [f64], usize)], idx: &[usize]) -> Vec<(&'a [f64], usize)> {
    idx.iter().map(|&i| data[i]).collect()
}

/// Predictions of a bare CNN on a labeled set.
pub fn evaluate_cnn(model: &CnnModel, data: &[(&[f64], usize)]) -> Result<Evaluation, NnError> {
    let inputs: Vec<&[f64]> = data.iter().map(|d| d.0).collect();
    let truth: Vec<usize> = data.iter().map(|d| d.1).collect();
    let preds: Vec<usize> = model
        .forward_many(&inputs)?
        .iter()
        .map(|o| argmax(&o.probs))
        .collect();
    Evaluation::from_predictions(&preds, &truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub model: CnnModel,
    pub history: TrainHistory,
    pub holdout: Evaluation,
    pub train_size: usize,
}

/// Trains every layer on the source data and scores a seeded stratified
/// held-out fraction.
pub fn pretrain_source(
    data: &[(&[f64], usize)],
    cfg: &TrainConfig,
    holdout_fraction: f64,
    seed: u64,
) -> Result<Pretrained, TransferError> {
    for label in Label::ALL {
        if !data.iter().any(|d| d.1 == label.index()) {
            return Err(TransferError::EmptyClass(label));
        }
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(TransferError::InvalidConfig(
            "holdout fraction must lie in (0, 1)".into(),
        ));
    }
    let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
    let (test_idx, train_idx) = stratified_split(&labels, holdout_fraction, seed);
    let train_set = pick(data, &train_idx);
    let test_set = pick(data, &test_idx);
    if test_set.is_empty() || train_set.is_empty() {
        return Err(TransferError::InvalidConfig(format!(
            "holdout fraction {holdout_fraction} leaves an empty split of {} samples",
            data.len()
        )));
    }
    let init = CnnModel::new(seed);
    let (model, history) = train(&init, &train_set, cfg)?;
    let holdout = evaluate_cnn(&model, &test_set)?;
    Ok(Pretrained {
        model,
        history,
        holdout,
        train_size: train_set.len(),
    })
}

/// Freezes the convolutions, swaps the dense head for a fresh softmax layer
/// after the feature layer and trains both on target data.
pub fn transfer_finetune(
    pretrained: &CnnModel,
    data: &[(&[f64], usize)],
    cfg: &TransferConfig,
    seed: u64,
) -> Result<CnnModel, TransferError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset.into());
    }
    let first = data[0].1;
    if data.iter().all(|d| d.1 == first) {
        return Err(TransferError::SingleClass);
    }
    let before = conv_digest(pretrained);
    let mut trunk = pretrained.with_fresh_head(seed, NUM_CLASSES);
    trunk.freeze_convs();
    let train_cfg = TrainConfig {
        epochs: cfg.finetune_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.finetune_lr,
        head_lr: Some(cfg.head_lr),
        seed,
        ..TrainConfig::default()
    };
    let (trunk, _) = train(&trunk, data, &train_cfg)?;
    if conv_digest(&trunk) != before {
        return Err(TransferError::FrozenViolation);
    }
    Ok(trunk)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "lowercase")]
pub enum Head {
    None,
    Svm(SvmModel),
    Rf(RfModel),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::None => HeadKind::None,
            Head::Svm(_) => HeadKind::Svm,
            Head::Rf(_) => HeadKind::Rf,
        }
    }
}

/// Fine-tuned trunk plus the classifier applied to its feature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub trunk: CnnModel,
    pub head: Head,
    /// Class index to label.
    pub labels: Vec<Label>,
}

/// Versioned JSON envelope for a head.
#[derive(Serialize, Deserialize)]
struct HeadFile {
    format: String,
    version: u32,
    labels: Vec<Label>,
    head: Head,
}

pub fn save_head(model: &HybridModel) -> String {
    let file = HeadFile {
        format: "widur-head".into(),
        version: HEAD_FORMAT_VERSION,
        labels: model.labels.clone(),
        head: model.head.clone(),
    };
    serde_json::to_string(&file).expect("head serializes")
}

/// Rebuilds a hybrid model from a trunk checkpoint and a head file.
pub fn load_hybrid(trunk: CnnModel, head_json: &str) -> Result<HybridModel, TransferError> {
    let file: HeadFile =
        serde_json::from_str(head_json).map_err(|e| TransferError::Head(e.to_string()))?;
    if file.format != "widur-head" || file.version != HEAD_FORMAT_VERSION {
        return Err(TransferError::Head(format!(
            "unsupported head format {} v{}",
            file.format, file.version
        )));
    }
    Ok(HybridModel {
        trunk,
        head: file.head,
        labels: file.labels,
    })
}

/// Fits the requested head on feature-layer activations of `data`.
pub fn fit_head(
    trunk: CnnModel,
    data: &[(&[f64], usize)],
    kind: HeadKind,
    svm_cfg: &SvmConfig,
    rf_cfg: &RfConfig,
    seed: u64,
) -> Result<HybridModel, TransferError> {
    let inputs: Vec<&[f64]> = data.iter().map(|d| d.0).collect();
    let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
    let head = match kind {
        HeadKind::None => Head::None,
        HeadKind::Svm | HeadKind::Rf => {
            let acts: Vec<Vec<f64>> = trunk
                .forward_many(&inputs)?
                .into_iter()
                .map(|o| o.fc1_act)
                .collect();
            let rows: Vec<&[f64]> = acts.iter().map(Vec::as_slice).collect();
            if kind == HeadKind::Svm {
                Head::Svm(svm_train(&rows, &labels, NUM_CLASSES, svm_cfg)?)
            } else {
                Head::Rf(rf_train(&rows, &labels, NUM_CLASSES, rf_cfg, seed)?)
            }
        }
    };
    Ok(HybridModel {
        trunk,
        head,
        labels: Label::ALL.to_vec(),
    })
}

impl HybridModel {
    fn classify(&self, probs: &[f64], fc1: &[f64]) -> (usize, Vec<f64>) {
        match &self.head {
            Head::None => (argmax(probs), probs.to_vec()),
            Head::Svm(m) => m.predict(fc1),
            Head::Rf(m) => m.predict(fc1),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>), TransferError> {
        let out = self.trunk.forward(x)?;
        Ok(self.classify(&out.probs, &out.fc1_act))
    }

    pub fn predict_many(&self, inputs: &[&[f64]]) -> Result<Vec<(usize, Vec<f64>)>, TransferError> {
        Ok(self
            .trunk
            .forward_many(inputs)?
            .iter()
            .map(|o| self.classify(&o.probs, &o.fc1_act))
            .collect())
    }

    pub fn evaluate(&self, data: &[(&[f64], usize)]) -> Result<Evaluation, TransferError> {
        let inputs: Vec<&[f64]> = data.iter().map(|d| d.0).collect();
        let truth: Vec<usize> = data.iter().map(|d| d.1).collect();
        let preds: Vec<usize> = self.predict_many(&inputs)?.into_iter().map(|p| p.0).collect();
        Ok(Evaluation::from_predictions(&preds, &truth)?)
    }
}

/// Label and class probabilities for one feature vector.
pub fn hybrid_predict(model: &HybridModel, x: &[f64]) -> Result<(Label, Vec<f64>), TransferError> {
    let (idx, probs) = model.predict(x)?;
    let label = model
        .labels
        .get(idx)
        .copied()
        .ok_or(TransferError::Head(format!("class {idx} missing from codebook")))?;
    Ok((label, probs))
}
