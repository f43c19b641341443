//! End-to-end experiment: synthetic benchmark, per-domain preprocessing and
//! featurization, source pre-training for every feature mode, transfer to
//! both targets with all three heads, and a byte-stable report.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classical::{RfConfig, SvmConfig};
use crate::csi_model::{CsiError, Label, LabeledInterval};
use crate::features::{
    assemble_feature_vector, min_segment_len, DwtConfig, FeatureError, FeatureMode, FeatureVector,
    SegmentRef, StftConfig, SPEC_BINS, SPEC_LEN, SPEC_SLOTS, WAVELET_LEVELS, WAVELET_SLOTS,
};
use crate::nn::{save_checkpoint, CnnModel, NnError, TrainConfig};
use crate::preprocess::{preprocess_trace, DenoiseConfig, PreprocessError};
use crate::segment::{detect_intervals, estimate_threshold, mean_best_iou, SegmentError, SegmenterConfig};
use crate::synth::{feature_shift, generate_scenario, make_transfer_benchmark, Scenario, ScenarioConfig, SynthError};
use crate::transfer::{
    conv_digest, evaluate_cnn, fit_head, pretrain_source, save_head, stratified_split,
    transfer_finetune, Evaluation, HeadKind, HybridModel, TransferConfig, TransferError,
};

pub const REPORT_SCHEMA: &str = "widur-eval";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub denoise: DenoiseConfig,
    pub segmenter: SegmenterConfig,
    pub stft: StftConfig,
    pub dwt: DwtConfig,
    /// The seed field is replaced by the experiment seed.
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    pub svm: SvmConfig,
    pub rf: RfConfig,
    pub source_holdout_fraction: f64,
    pub target_train_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            denoise: DenoiseConfig::default(),
            segmenter: SegmenterConfig::default(),
            stft: StftConfig::default(),
            dwt: DwtConfig::default(),
            train: TrainConfig::default(),
            transfer: TransferConfig::default(),
            svm: SvmConfig::default(),
            rf: RfConfig::default(),
            source_holdout_fraction: 0.1,
            target_train_fraction: 0.5,
        }
    }
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn features_digest(rows: &[Vec<f64>], labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for (r, l) in rows.iter().zip(labels) {
        for v in r {
            h.update(v.to_le_bytes());
        }
        h.update((*l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Frame range handed to the feature extractor: the interval itself, or a
/// window of `min_len` frames centered on it and clamped to the trace.
pub fn extraction_window(start: usize, end: usize, min_len: usize, trace_len: usize) -> (usize, usize) {
    let len = end - start;
    if len >= min_len || trace_len <= min_len {
        return (start, end.min(trace_len));
    }
    let extra = min_len - len;
    let s = start.saturating_sub(extra / 2);
    let s = s.min(trace_len - min_len);
    (s, s + min_len)
}

/// Features for every interval of a PC1 series.
pub fn featurize_intervals(
    pc1: &[f64],
    intervals: &[(usize, usize)],
    stft: &StftConfig,
    dwt: &DwtConfig,
    mode: FeatureMode,
    trace_id: &str,
) -> Result<Vec<FeatureVector>, FeatureError> {
    let min_len = min_segment_len(stft, dwt);
    intervals
        .iter()
        .map(|&(s, e)| {
            let (ws, we) = extraction_window(s, e, min_len, pc1.len());
            let mut fv = assemble_feature_vector(&pc1[ws..we], stft, dwt, mode)?;
            fv.source = Some(SegmentRef {
                trace_id: trace_id.to_string(),
                start_idx: ws,
                end_idx: we,
            });
            Ok(fv)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub threshold: f64,
    pub detected: usize,
    /// Ground-truth intervals with motion (empty windows excluded).
    pub activity_intervals: usize,
    pub mean_iou: f64,
}

/// Calibrates on `pc1[..calibration_end]` and detects intervals on the rest.
pub fn segment_series(
    pc1: &[f64],
    calibration_end: usize,
    cfg: &SegmenterConfig,
    fs: f64,
) -> Result<(f64, Vec<(usize, usize)>), SegmentError> {
    let threshold = estimate_threshold(&pc1[..calibration_end.min(pc1.len())], cfg)?;
    Ok((threshold, detect_intervals(pc1, threshold, cfg, fs)?))
}

/// Mean best IoU of the detections against the ground-truth activities.
pub fn segmentation_report(
    threshold: f64,
    detected: &[(usize, usize)],
    truth: &[LabeledInterval],
) -> SegmentationReport {
    let activities: Vec<(usize, usize)> = truth
        .iter()
        .filter(|i| i.label != Label::Empty)
        .map(|i| (i.start_idx, i.end_idx))
        .collect();
    SegmentationReport {
        threshold,
        detected: detected.len(),
        activity_intervals: activities.len(),
        mean_iou: mean_best_iou(detected, &activities),
    }
}

/// Featurized ground-truth segments of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain_id: String,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub segmentation: SegmentationReport,
}

impl DomainData {
    fn rows(&self, mode: FeatureMode) -> Vec<Vec<f64>> {
        self.features
            .iter()
            .map(|f| {
                let mut v = f.clone();
                mode.apply(&mut v);
                v
            })
            .collect()
    }
}

/// Preprocesses a scenario, scores segmentation and featurizes every
/// ground-truth interval with both feature halves.
pub fn process_scenario(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<DomainData, ExperimentError> {
    let trace = &scenario.trace;
    let pca = preprocess_trace(trace, &cfg.denoise)?;
    let fs = trace.sampling_rate_hz();
    let (threshold, detected) = segment_series(&pca.scores, scenario.calibration_end, &cfg.segmenter, fs)?;
    let segmentation = segmentation_report(threshold, &detected, &scenario.intervals);
    let ranges: Vec<(usize, usize)> = scenario.intervals.iter().map(|i| (i.start_idx, i.end_idx)).collect();
    let features = featurize_intervals(
        &pca.scores,
        &ranges,
        &cfg.stft,
        &cfg.dwt,
        FeatureMode::Both,
        &trace.manifest().trace_id,
    )?;
    Ok(DomainData {
        domain_id: trace.manifest().domain_id.clone(),
        features: features.into_iter().map(|f| f.values).collect(),
        labels: scenario.intervals.iter().map(|i| i.label.index()).collect(),
        segmentation,
    })
}

pub fn build_domain(cfg: &ScenarioConfig, exp: &ExperimentConfig) -> Result<DomainData, ExperimentError> {
    let scenario = generate_scenario(cfg)?;
    process_scenario(&scenario, exp)
}

/// The four compared models on one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub source_only_cnn: Evaluation,
    pub tl_cnn: Evaluation,
    pub tl_cnn_svm: Evaluation,
    pub tl_cnn_rf: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    pub train_size: usize,
    pub test_size: usize,
    pub conv_sha256_before: String,
    pub conv_sha256_after: String,
    pub models: ModelScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: FeatureMode,
    pub source_holdout: Evaluation,
    pub targets: Vec<TargetReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: String,
    pub segments: usize,
    pub feature_sha256: String,
    pub segmentation: SegmentationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub target: String,
    pub symmetric_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub benchmark_sha256: String,
    pub domains: Vec<DomainSummary>,
    /// Mean IoU on the source trace.
    pub segmentation_mean_iou: f64,
    pub source_holdout: Evaluation,
    /// Combined-feature results per target.
    pub targets: Vec<TargetReport>,
    /// Every feature mode, the combined one included.
    pub ablation: Vec<ModeReport>,
    pub shift: Vec<ShiftEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn target(&self, id: &str) -> Option<&TargetReport> {
        self.targets.iter().find(|t| t.target == id)
    }

    pub fn mode(&self, mode: FeatureMode) -> Option<&ModeReport> {
        self.ablation.iter().find(|m| m.mode == mode)
    }
}

/// Trained artifacts for one target.
#[derive(Debug, Clone)]
pub struct TargetArtifacts {
    pub target: String,
    pub svm: HybridModel,
    pub rf: HybridModel,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub config: ExperimentConfig,
    pub source_model: CnnModel,
    pub targets: Vec<TargetArtifacts>,
    /// One source feature vector per class, in label order.
    pub class_examples: Vec<(Label, Vec<f64>)>,
}

struct ModeResult {
    report: ModeReport,
    source_model: CnnModel,
    artifacts: Vec<TargetArtifacts>,
}

type Split = (Vec<usize>, Vec<usize>);

fn refs<'a>(rows: &'a [Vec<f64>], labels: &[usize], idx: &[usize]) -> Vec<(&'a [f64], usize)> {
    idx.iter().map(|&i| (rows[i].as_slice(), labels[i])).collect()
}

fn run_mode(
    mode: FeatureMode,
    source: &DomainData,
    targets: &[(&str, &DomainData, &Split)],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ModeResult, ExperimentError> {
    let rows = source.rows(mode);
    let all: Vec<usize> = (0..rows.len()).collect();
    let data = refs(&rows, &source.labels, &all);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let pre = pretrain_source(&data, &train_cfg, cfg.source_holdout_fraction, seed)?;
    let before = conv_digest(&pre.model);

    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for &(id, domain, (train_idx, test_idx)) in targets {
        let trows = domain.rows(mode);
        let train = refs(&trows, &domain.labels, train_idx);
        let test = refs(&trows, &domain.labels, test_idx);
        let source_only = evaluate_cnn(&pre.model, &test)?;
        let trunk = transfer_finetune(&pre.model, &train, &cfg.transfer, seed.wrapping_add(1))?;
        let after = conv_digest(&trunk);
        let fit = |kind| fit_head(trunk.clone(), &train, kind, &cfg.svm, &cfg.rf, seed.wrapping_add(2));
        let none = fit(HeadKind::None)?;
        let svm = fit(HeadKind::Svm)?;
        let rf = fit(HeadKind::Rf)?;
        reports.push(TargetReport {
            target: id.to_string(),
            train_size: train.len(),
            test_size: test.len(),
            conv_sha256_before: before.clone(),
            conv_sha256_after: after,
            models: ModelScores {
                source_only_cnn: source_only,
                tl_cnn: none.evaluate(&test)?,
                tl_cnn_svm: svm.evaluate(&test)?,
                tl_cnn_rf: rf.evaluate(&test)?,
            },
        });
        artifacts.push(TargetArtifacts {
            target: id.to_string(),
            svm,
            rf,
        });
    }
    Ok(ModeResult {
        report: ModeReport {
            mode,
            source_holdout: pre.holdout,
            targets: reports,
        },
        source_model: pre.model,
        artifacts,
    })
}

/// Worker threads requested through `WIDUR_THREADS`; 0 or unset means
/// single-threaded.
pub fn threads_from_env() -> usize {
    std::env::var("WIDUR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Runs the whole benchmark for one seed. Cells run on up to `threads`
/// workers and are merged in fixed order, so the report does not depend on
/// the thread count.
pub fn run_experiment(
    seed: u64,
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<ExperimentOutcome, ExperimentError> {
    let bench = make_transfer_benchmark(seed);
    let benchmark_sha256 = sha256_hex(serde_json::to_string(&bench).expect("serializes").as_bytes());
    let source = build_domain(&bench.source, cfg)?;
    let mut targets = Vec::new();
    for (id, scfg) in bench.targets() {
        targets.push((id, build_domain(scfg, cfg)?));
    }

    let splits: Vec<Split> = targets
        .iter()
        .map(|(_, d)| stratified_split(&d.labels, cfg.target_train_fraction, seed))
        .collect();
    let target_refs: Vec<(&str, &DomainData, &Split)> = targets
        .iter()
        .zip(&splits)
        .map(|((id, d), s)| (*id, d, s))
        .collect();

    let cell = |mode| run_mode(mode, &source, &target_refs, cfg, seed);
    let results: Vec<ModeResult> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| ExperimentError::Threads(e.to_string()))?;
        pool.install(|| FeatureMode::ALL.par_iter().map(|&m| cell(m)).collect::<Result<_, _>>())?
    } else {
        FeatureMode::ALL.iter().map(|&m| cell(m)).collect::<Result<_, _>>()?
    };

    let mut domains = vec![DomainSummary {
        domain: source.domain_id.clone(),
        segments: source.labels.len(),
        feature_sha256: features_digest(&source.features, &source.labels),
        segmentation: source.segmentation.clone(),
    }];
    let mut shift = Vec::new();
    let src_rows: Vec<(&[f64], usize)> = source
        .features
        .iter()
        .zip(&source.labels)
        .map(|(f, &l)| (f.as_slice(), l))
        .collect();
    for (id, d) in &targets {
        domains.push(DomainSummary {
            domain: d.domain_id.clone(),
            segments: d.labels.len(),
            feature_sha256: features_digest(&d.features, &d.labels),
            segmentation: d.segmentation.clone(),
        });
        let rows: Vec<(&[f64], usize)> = d.features.iter().zip(&d.labels).map(|(f, &l)| (f.as_slice(), l)).collect();
        shift.push(ShiftEntry {
            target: id.to_string(),
            symmetric_kl: feature_shift(&src_rows, &rows),
        });
    }

    let class_examples = Label::ALL
        .iter()
        .filter_map(|&l| {
            let i = source.labels.iter().position(|&x| x == l.index())?;
            Some((l, source.features[i].clone()))
        })
        .collect();

    let mut results = results.into_iter();
    let both = results.next().expect("combined mode runs first");
    let mut ablation = vec![both.report.clone()];
    ablation.extend(results.map(|r| r.report));

    let report = EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        version: REPORT_VERSION,
        seed,
        config_sha256: cfg.digest(),
        benchmark_sha256,
        segmentation_mean_iou: source.segmentation.mean_iou,
        domains,
        source_holdout: both.report.source_holdout.clone(),
        targets: both.report.targets.clone(),
        ablation,
        shift,
    };
    Ok(ExperimentOutcome {
        report,
        config: cfg.clone(),
        source_model: both.source_model,
        targets: both.artifacts,
        class_examples,
    })
}

/// Spectrogram grid of a feature vector as CSV (one row per time slot).
pub fn spectrogram_csv(values: &[f64]) -> String {
    let mut out = String::from("slot");
    for b in 0..SPEC_BINS {
        out.push_str(&format!(",bin{b:02}"));
    }
    out.push('\n');
    for t in 0..SPEC_SLOTS {
        out.push_str(&t.to_string());
        for v in &values[t * SPEC_BINS..(t + 1) * SPEC_BINS] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Wavelet energy map of a feature vector as CSV (one row per level).
pub fn wavelet_csv(values: &[f64]) -> String {
    let mut out = String::from("level");
    for s in 0..WAVELET_SLOTS {
        out.push_str(&format!(",slot{s:02}"));
    }
    out.push('\n');
    for j in 0..WAVELET_LEVELS {
        out.push_str(&(j + 1).to_string());
        let row = &values[SPEC_LEN + j * WAVELET_SLOTS..SPEC_LEN + (j + 1) * WAVELET_SLOTS];
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct ConfigFile<'a> {
    seed: u64,
    config_sha256: String,
    benchmark_sha256: &'a str,
    config: &'a ExperimentConfig,
    benchmark: crate::synth::TransferBenchmark,
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes the report, provenance, checkpoints, heads and plot data.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let report = &outcome.report;
    write(&dir.join("metrics.json"), &report.to_json())?;
    let config = ConfigFile {
        seed: report.seed,
        config_sha256: report.config_sha256.clone(),
        benchmark_sha256: &report.benchmark_sha256,
        config: &outcome.config,
        benchmark: make_transfer_benchmark(report.seed),
    };
    let mut text = serde_json::to_string_pretty(&config).expect("config serializes");
    text.push('\n');
    write(&dir.join("config.json"), &text)?;
    write(&dir.join("source_model.ckpt"), &save_checkpoint(&outcome.source_model))?;
    for t in &outcome.targets {
        let tdir = dir.join(format!("target_{}", t.target));
        fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
        write(&tdir.join("trunk.ckpt"), &save_checkpoint(&t.svm.trunk))?;
        write(&tdir.join("head_svm.json"), &save_head(&t.svm))?;
        write(&tdir.join("head_rf.json"), &save_head(&t.rf))?;
    }
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    for (label, values) in &outcome.class_examples {
        write(&plots.join(format!("spectrogram_{label}.csv")), &spectrogram_csv(values))?;
        write(&plots.join(format!("wavelet_{label}.csv")), &wavelet_csv(values))?;
    }
    Ok(())
}
