//! WiFi CSI recognition of dressing and undressing.
//!
//! The pipeline runs: CSI trace -> Hampel/moving-average denoising -> PC1
//! -> sliding-variance activity detection -> STFT + wavelet features ->
//! 1D CNN pre-trained on a source domain, conv trunk frozen, feature layer
//! fine-tuned on the target domain, and an SVM or random-forest head on the
//! feature-layer activations. [`synth`] generates CSI with known ground truth
//! so every stage can be checked.

pub mod classical;
pub mod csi_model;
pub mod experiment;
pub mod features;
pub mod nn;
pub mod preprocess;
pub mod segment;
pub mod synth;
pub mod transfer;
