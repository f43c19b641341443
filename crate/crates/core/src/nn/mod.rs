//! From-scratch 1D CNN: layers, training, gradient checking and metrics.

mod checkpoint;
mod metrics;
mod model;
mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use metrics::{accuracy, confusion_matrix, macro_f1};
pub use model::{argmax, softmax, CnnModel, Conv1d, Dense, ForwardOutput, FEATURE_DIM, NUM_CLASSES};
pub use train::{evaluate_loss, grad_check, train, train_with_validation, TrainConfig, TrainHistory};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("expected input of length {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {0} outside the model's classes")]
    UnknownLabel(usize),
    #[error("predictions ({preds}) and truth ({truth}) differ in length")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("no samples to score")]
    EmptyInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training loss became non-finite")]
    Diverged,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
