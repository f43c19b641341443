//! `widur` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use widur_core::csi_model::{parse_labels, parse_trace, write_labels, write_trace, CsiTrace, Label};
use widur_core::experiment::{
    featurize_intervals, run_experiment, segment_series, segmentation_report, threads_from_env,
    write_outcome, ExperimentConfig,
};
use widur_core::features::{parse_feature_csv, write_feature_csv, FeatureMode};
use widur_core::nn::{load_checkpoint, save_checkpoint, TrainConfig};
use widur_core::preprocess::preprocess_trace;
use widur_core::synth::{generate_scenario, make_transfer_benchmark, ScenarioConfig};
use widur_core::transfer::{
    conv_digest, fit_head, hybrid_predict, load_hybrid, pretrain_source, save_head,
    stratified_split, transfer_finetune, HeadKind,
};

#[derive(Parser)]
#[command(name = "widur", version, about = "WiFi CSI dressing-activity recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace with ground-truth labels.
    Synth {
        /// Scenario config (JSON); defaults to a benchmark domain.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmark domain used without --config: a, b or c.
        #[arg(long, default_value = "b")]
        domain: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect activity intervals in a trace.
    Segment {
        #[arg(long)]
        trace: PathBuf,
        /// Manifest JSON; defaults to the trace path with a .json extension.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Seconds of static recording at the start used for calibration.
        #[arg(long, default_value_t = 10.0)]
        calibration_s: f64,
        /// Ground-truth labels; enables the IoU report.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract feature vectors for labeled intervals.
    Featurize {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "both")]
        mode: FeatureMode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CNN on a feature CSV.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a source checkpoint on target features and fit a head.
    Transfer {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "svm")]
        head: HeadKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify feature vectors with a transfer bundle.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full benchmark and write the report bundle.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Segment { .. } => "segment",
            Command::Featurize { .. } => "featurize",
            Command::Train { .. } => "train",
            Command::Transfer { .. } => "transfer",
            Command::Predict { .. } => "predict",
            Command::Experiment { .. } => "experiment",
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display())),
    }
}

fn load_trace(trace: &Path, manifest: Option<&Path>) -> Result<CsiTrace> {
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| trace.with_extension("json"));
    parse_trace(&read(trace)?, &read(&manifest)?)
        .with_context(|| format!("parsing {}", trace.display()))
}

fn load_features(path: &Path) -> Result<Vec<(Vec<f64>, usize)>> {
    let rows = parse_feature_csv(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows.into_iter().map(|(f, l)| (f.values, l.index())).collect())
}

fn as_refs(rows: &[(Vec<f64>, usize)]) -> Vec<(&[f64], usize)> {
    rows.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
}

fn cmd_synth(config: Option<&Path>, domain: &str, seed: u64, out: &Path) -> Result<()> {
    let cfg: ScenarioConfig = match config {
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => {
            let bench = make_transfer_benchmark(seed);
            match domain.to_ascii_lowercase().as_str() {
                "a" => bench.source,
                "b" => bench.target_b,
                "c" => bench.target_c,
                other => bail!("unknown domain {other:?}; expected a, b or c"),
            }
        }
    };
    let scenario = generate_scenario(&cfg)?;
    let (csv, manifest) = write_trace(&scenario.trace);
    write(&out.join("trace.csv"), &csv)?;
    write(&out.join("trace.json"), &manifest)?;
    write(&out.join("labels.csv"), &write_labels(&scenario.intervals))?;
    let mut text = serde_json::to_string_pretty(&cfg)?;
    text.push('\n');
    write(&out.join("scenario.json"), &text)?;
    println!(
        "{}",
        json!({"frames": scenario.trace.len(), "intervals": scenario.intervals.len(),
               "calibration_end": scenario.calibration_end})
    );
    Ok(())
}

fn cmd_segment(
    trace: &Path,
    manifest: Option<&Path>,
    calibration_s: f64,
    labels: Option<&Path>,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<()> {
    let trace = load_trace(trace, manifest)?;
    let fs_hz = trace.sampling_rate_hz();
    let calibration_end = (calibration_s * fs_hz).round() as usize;
    let pca = preprocess_trace(&trace, &cfg.denoise)?;
    let (threshold, detected) = segment_series(&pca.scores, calibration_end, &cfg.segmenter, fs_hz)?;
    let mut csv = String::from("start_idx,end_idx\n");
    for (s, e) in &detected {
        csv.push_str(&format!("{s},{e}\n"));
    }
    write(out, &csv)?;
    let mut summary = json!({"threshold": threshold, "detected": detected.len()});
    if let Some(path) = labels {
        let truth = parse_labels(&read(path)?, &trace).with_context(|| format!("parsing {}", path.display()))?;
        let report = segmentation_report(threshold, &detected, &truth);
        summary["mean_iou"] = json!(report.mean_iou);
        summary["activity_intervals"] = json!(report.activity_intervals);
    }
    println!("{summary}");
    Ok(())
}

fn cmd_featurize(
    trace_path: &Path,
    manifest: Option<&Path>,
    labels: &Path,
    mode: FeatureMode,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<()> {
    let trace = load_trace(trace_path, manifest)?;
    let intervals =
        parse_labels(&read(labels)?, &trace).with_context(|| format!("parsing {}", labels.display()))?;
    let pca = preprocess_trace(&trace, &cfg.denoise)?;
    let ranges: Vec<(usize, usize)> = intervals.iter().map(|i| (i.start_idx, i.end_idx)).collect();
    let features = featurize_intervals(
        &pca.scores,
        &ranges,
        &cfg.stft,
        &cfg.dwt,
        mode,
        &trace.manifest().trace_id,
    )?;
    let rows: Vec<_> = features.into_iter().zip(intervals.iter().map(|i| i.label)).collect();
    write(out, &write_feature_csv(&rows))?;
    println!("{}", json!({"rows": rows.len(), "mode": mode.as_str()}));
    Ok(())
}

fn cmd_train(features: &Path, cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let rows = load_features(features)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let pre = pretrain_source(&as_refs(&rows), &train_cfg, cfg.source_holdout_fraction, seed)?;
    write(out, &save_checkpoint(&pre.model))?;
    println!(
        "{}",
        json!({"train_size": pre.train_size, "holdout_accuracy": pre.holdout.accuracy,
               "holdout_macro_f1": pre.holdout.macro_f1})
    );
    Ok(())
}

fn cmd_transfer(
    source: &Path,
    features: &Path,
    head: HeadKind,
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let source_text = read(source)?;
    let pretrained = load_checkpoint(&source_text).with_context(|| format!("parsing {}", source.display()))?;
    let rows = load_features(features)?;
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let (train_idx, test_idx) = stratified_split(&labels, cfg.target_train_fraction, seed);
    let all = as_refs(&rows);
    let train: Vec<_> = train_idx.iter().map(|&i| all[i]).collect();
    let test: Vec<_> = test_idx.iter().map(|&i| all[i]).collect();

    let trunk = transfer_finetune(&pretrained, &train, &cfg.transfer, seed.wrapping_add(1))?;
    let hybrid = fit_head(trunk, &train, head, &cfg.svm, &cfg.rf, seed.wrapping_add(2))?;
    let metrics = if test.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::to_value(hybrid.evaluate(&test)?)?
    };

    write(&out.join("source_model.ckpt"), &source_text)?;
    write(&out.join("trunk.ckpt"), &save_checkpoint(&hybrid.trunk))?;
    write(&out.join("head.json"), &save_head(&hybrid))?;
    let report = json!({
        "head": head.as_str(),
        "train_size": train.len(),
        "test_size": test.len(),
        "conv_sha256_before": conv_digest(&pretrained),
        "conv_sha256_after": conv_digest(&hybrid.trunk),
        "test": metrics,
    });
    write(&out.join("metrics.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let config = json!({
        "seed": seed,
        "config_sha256": cfg.digest(),
        "config": cfg,
        "source_checkpoint": source.display().to_string(),
        "features": features.display().to_string(),
    });
    write(&out.join("config.json"), &(serde_json::to_string_pretty(&config)? + "\n"))?;
    println!("{}", report["test"]);
    Ok(())
}

fn cmd_predict(bundle: &Path, features: &Path, out: &Path) -> Result<()> {
    let trunk_path = bundle.join("trunk.ckpt");
    let trunk = load_checkpoint(&read(&trunk_path)?)
        .with_context(|| format!("parsing {}", trunk_path.display()))?;
    let head_path = bundle.join("head.json");
    let hybrid = load_hybrid(trunk, &read(&head_path)?)
        .with_context(|| format!("parsing {}", head_path.display()))?;
    let rows = load_features(features)?;
    let mut csv = String::from("row,label");
    for l in Label::ALL {
        csv.push_str(&format!(",p_{l}"));
    }
    csv.push('\n');
    let mut correct = 0;
    for (i, (x, truth)) in rows.iter().enumerate() {
        let (label, probs) = hybrid_predict(&hybrid, x)?;
        if label.index() == *truth {
            correct += 1;
        }
        csv.push_str(&format!("{i},{label}"));
        for p in probs {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
    }
    write(out, &csv)?;
    let accuracy = if rows.is_empty() { 0.0 } else { correct as f64 / rows.len() as f64 };
    println!("{}", json!({"rows": rows.len(), "accuracy": accuracy}));
    Ok(())
}

fn cmd_experiment(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let outcome = run_experiment(seed, cfg, threads_from_env())?;
    write_outcome(&outcome, out)?;
    let r = &outcome.report;
    let targets: Vec<_> = r
        .targets
        .iter()
        .map(|t| {
            json!({"target": t.target,
                   "source_only_cnn": t.models.source_only_cnn.accuracy,
                   "tl_cnn": t.models.tl_cnn.accuracy,
                   "tl_cnn_svm": t.models.tl_cnn_svm.accuracy,
                   "tl_cnn_rf": t.models.tl_cnn_rf.accuracy})
        })
        .collect();
    println!(
        "{}",
        json!({"seed": seed, "source_holdout_accuracy": r.source_holdout.accuracy,
               "segmentation_mean_iou": r.segmentation_mean_iou, "targets": targets})
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, domain, seed, out } => cmd_synth(config.as_deref(), &domain, seed, &out),
        Command::Segment { trace, manifest, calibration_s, labels, config, seed: _, out } => {
            let cfg = load_config(config.as_deref())?;
            cmd_segment(&trace, manifest.as_deref(), calibration_s, labels.as_deref(), &cfg, &out)
        }
        Command::Featurize { trace, manifest, labels, mode, config, seed: _, out } => {
            let cfg = load_config(config.as_deref())?;
            cmd_featurize(&trace, manifest.as_deref(), &labels, mode, &cfg, &out)
        }
        Command::Train { features, config, seed, out } => {
            cmd_train(&features, &load_config(config.as_deref())?, seed, &out)
        }
        Command::Transfer { source, features, head, config, seed, out } => {
            cmd_transfer(&source, &features, head, &load_config(config.as_deref())?, seed, &out)
        }
        Command::Predict { bundle, features, seed: _, out } => cmd_predict(&bundle, &features, &out),
        Command::Experiment { config, seed, out } => {
            cmd_experiment(&load_config(config.as_deref())?, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("{}", json!({"status": "error", "command": command, "message": message}));
            ExitCode::FAILURE
        }
    }
}

