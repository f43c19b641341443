//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use widur_core::csi_model::Label;
use widur_core::experiment::{run_experiment, segment_series, write_outcome, ExperimentConfig, ExperimentOutcome};
use widur_core::features::{
    dwt_multilevel, idwt_multilevel, level_band, speed_of, stft, windowed_power_spectrum, FeatureMode,
    StftConfig, FEATURE_LEN,
};
use widur_core::nn::{accuracy, confusion_matrix, grad_check, macro_f1, CnnModel};
use widur_core::preprocess::{pca_first_component, preprocess_trace, DenoiseConfig};
use widur_core::segment::{sliding_variance, SegmenterConfig};
use widur_core::synth::{generate_scenario, make_transfer_benchmark, ScenarioConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took <= budget, format!("took {took:.1?}, budget {budget:?}"))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn close(a: f64, b: f64, rel: f64, scale: f64) -> bool {
    (a - b).abs() <= rel * scale.max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let ms = [2usize, 10, 50];
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let len = rng.random_range(50..=5000);
        let m = ms[case % ms.len()];
        let offset = rng.random_range(-50.0..50.0);
        let series: Vec<f64> = (0..len).map(|_| offset + rng.random_range(-3.0..3.0)).collect();
        let got = sliding_variance(&series, m).map_err(|e| e.to_string())?;
        check(got.len() == len - m + 1, format!("case {case}: {} windows", got.len()))?;
        for (i, g) in got.iter().enumerate() {
            let w = &series[i..i + m];
            let mut mean = 0.0;
            for x in w {
                mean += x;
            }
            mean /= m as f64;
            let mut var = 0.0;
            for x in w {
                var += (x - mean) * (x - mean);
            }
            var /= m as f64;
            let rel = (g - var).abs() / var.abs().max(1e-300);
            worst = worst.max(rel);
            check(close(*g, var, 1e-12, var.abs()), format!("case {case} window {i}: {g} vs {var}"))?;
        }
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok(format!("100 series, worst relative error {worst:.2e}"))
}

fn direct_power(frame: &[f64], bins: usize) -> Vec<f64> {
    let n = frame.len();
    (0..bins)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, x) in frame.iter().enumerate() {
                let w = 0.5 - 0.5 * (2.0 * PI * t as f64 / n as f64).cos();
                let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                re += w * x * ang.cos();
                im += w * x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = StftConfig {
        window_len: 64,
        hop: 32,
        kept_bins: 33,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut frames_checked = 0;
    for _ in 0..10 {
        let series: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = stft(&series, &cfg).map_err(|e| e.to_string())?;
        check(spec.frames == (1000 - 64) / 32 + 1, format!("{} frames", spec.frames))?;
        for t in 0..spec.frames {
            let frame = &series[t * 32..t * 32 + 64];
            let want = direct_power(frame, 33);
            let scale = want.iter().cloned().fold(0.0, f64::max);
            for (k, (g, w)) in spec.row(t).iter().zip(&want).enumerate() {
                check(close(*g, *w, 1e-9, scale), format!("frame {t} bin {k}: {g} vs {w}"))?;
            }
            let window: Vec<f64> =
                (0..64).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / 64.0).cos()).collect();
            let full = windowed_power_spectrum(frame, &window);
            let time_energy: f64 = frame.iter().zip(&window).map(|(x, w)| (x * w).powi(2)).sum();
            let freq_energy: f64 = full.iter().sum::<f64>() / 64.0;
            check(
                close(time_energy, freq_energy, 1e-9, time_energy),
                format!("Parseval frame {t}: {time_energy} vs {freq_energy}"),
            )?;
            frames_checked += 1;
        }
    }
    let default_cfg = StftConfig::default();
    for bin in [2usize, 4, 7, 11, 15] {
        let f = bin as f64 * 200.0 / 64.0;
        let tone: Vec<f64> = (0..800).map(|i| (2.0 * PI * f * i as f64 / 200.0).sin()).collect();
        let spec = stft(&tone, &default_cfg).map_err(|e| e.to_string())?;
        for t in 0..spec.frames {
            let row = spec.row(t);
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            check(peak == bin, format!("{f} Hz tone peaks at bin {peak}, expected {bin}"))?;
        }
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok(format!("{frames_checked} frames vs direct DFT, 5 pure tones"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_rec: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    for case in 0..50 {
        let x: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coeffs = dwt_multilevel(&x, 8).map_err(|e| e.to_string())?;
        let back = idwt_multilevel(&coeffs);
        check(back.len() == x.len(), format!("case {case}: length {}", back.len()))?;
        let rec = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_rec = worst_rec.max(rec);
        check(rec <= 1e-8, format!("case {case}: reconstruction error {rec:e}"))?;
        let e_time: f64 = x.iter().map(|v| v * v).sum();
        let e_coef: f64 = coeffs.details.iter().flatten().chain(&coeffs.approx).map(|v| v * v).sum();
        let rel = (e_time - e_coef).abs() / e_time;
        worst_energy = worst_energy.max(rel);
        check(rel <= 1e-6, format!("case {case}: energy mismatch {rel:e}"))?;
    }
    check(level_band(1, 100.0) == (25.0, 50.0), format!("level 1 band {:?}", level_band(1, 100.0)))?;
    check(level_band(2, 100.0) == (12.5, 25.0), format!("level 2 band {:?}", level_band(2, 100.0)))?;
    let v = speed_of(25.0, 2.4);
    check((v - 1.5625).abs() <= 0.01 * 1.5625, format!("speed_of(25 Hz, 2.4 GHz) = {v}"))?;
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!(
        "reconstruction {worst_rec:.1e}, energy {worst_energy:.1e}, speed {v:.4} m/s"
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (n, d) = (200usize, 30usize);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
        let rows: Vec<f64> = (0..n * d).map(|i| scales[i % d] * rng.random_range(-1.0..1.0)).collect();
        let got = pca_first_component(&rows, d).map_err(|e| e.to_string())?;

        let m = DMatrix::from_row_slice(n, d, &rows);
        let mean = m.row_mean();
        let mut centered = m.clone();
        for mut r in centered.row_iter_mut() {
            r -= &mean;
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.imax();
        let lambda = eig.eigenvalues[top];
        let vec = eig.eigenvectors.column(top);
        let sign = if vec.dot(&nalgebra::DVector::from_column_slice(&got.loading)) < 0.0 { -1.0 } else { 1.0 };
        check(
            close(got.eigenvalue, lambda, 1e-8, lambda),
            format!("case {case}: eigenvalue {} vs {lambda}", got.eigenvalue),
        )?;
        for k in 0..d {
            let diff = (got.loading[k] - sign * vec[k]).abs();
            worst = worst.max(diff);
            check(diff <= 1e-8, format!("case {case}: loading[{k}] off by {diff:e}"))?;
        }
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok(format!("20 matrices, worst loading error {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let model = CnnModel::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let x: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random_range(-12.0..2.0)).collect();
        let y = (seed as usize) % Label::COUNT;
        let err = grad_check(&model, &x, y, 1e-5, 100, seed).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        check(err < 1e-4, format!("seed {seed}: max relative error {err:e}"))?;
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("5 seeds x 100 parameters, worst relative error {worst:.2e}"))
}

fn criterion_6() -> Outcome {
    let truth = [0usize, 0, 1, 1];
    let preds = [0usize, 1, 1, 1];
    let f1 = macro_f1(&preds, &truth, 2).map_err(|e| e.to_string())?;
    let want = (2.0 / 3.0 + 4.0 / 5.0) / 2.0;
    check(f1 == want, format!("two-class macro F1 {f1} vs {want}"))?;
    let acc = accuracy(&preds, &truth).map_err(|e| e.to_string())?;
    check(acc == 0.75, format!("two-class accuracy {acc}"))?;
    let padded = macro_f1(&preds, &truth, 5).map_err(|e| e.to_string())?;
    check(padded == want, format!("absent classes change macro F1 to {padded}"))?;
    let cm = confusion_matrix(&preds, &truth, 2).map_err(|e| e.to_string())?;
    check(cm == vec![vec![1, 1], vec![0, 2]], format!("two-class confusion {cm:?}"))?;

    let truth = [0usize, 0, 0, 1, 1, 2];
    let preds = [0usize, 0, 1, 1, 2, 2];
    let f1 = macro_f1(&preds, &truth, 3).map_err(|e| e.to_string())?;
    let want = (0.8 + 0.5 + 2.0 / 3.0) / 3.0;
    check(f1 == want, format!("three-class macro F1 {f1} vs {want}"))?;
    let acc = accuracy(&preds, &truth).map_err(|e| e.to_string())?;
    check(acc == 4.0 / 6.0, format!("three-class accuracy {acc}"))?;

    let perfect = macro_f1(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4], 5).map_err(|e| e.to_string())?;
    check(perfect == 1.0, format!("perfect macro F1 {perfect}"))?;
    Ok(format!("two-class macro F1 {:.4}", (2.0 / 3.0 + 4.0 / 5.0) / 2.0))
}

fn best_iou(truth: (usize, usize), detected: &[(usize, usize)]) -> f64 {
    detected
        .iter()
        .map(|&(s, e)| {
            let lo = s.max(truth.0);
            let hi = e.min(truth.1);
            let inter = hi.saturating_sub(lo) as f64;
            let union = ((e - s) + (truth.1 - truth.0)) as f64 - inter;
            inter / union
        })
        .fold(0.0, f64::max)
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let bench = make_transfer_benchmark(SEEDS[0]);
    let scenario = generate_scenario(&bench.source).map_err(|e| e.to_string())?;
    let pca = preprocess_trace(&scenario.trace, &DenoiseConfig::default()).map_err(|e| e.to_string())?;
    let fs = scenario.trace.sampling_rate_hz();
    let cfg = SegmenterConfig::default();
    let (_, detected) =
        segment_series(&pca.scores, scenario.calibration_end, &cfg, fs).map_err(|e| e.to_string())?;
    let truth: Vec<(usize, usize)> = scenario
        .intervals
        .iter()
        .filter(|i| i.label != Label::Empty)
        .map(|i| (i.start_idx, i.end_idx))
        .collect();
    let iou = truth.iter().map(|&t| best_iou(t, &detected)).sum::<f64>() / truth.len() as f64;
    check(iou >= 0.8, format!("mean IoU {iou:.3} over {} activities", truth.len()))?;

    let still = ScenarioConfig::new(bench.source.domain.clone(), [60, 0, 0, 0, 0]);
    let still = generate_scenario(&still).map_err(|e| e.to_string())?;
    let pca = preprocess_trace(&still.trace, &DenoiseConfig::default()).map_err(|e| e.to_string())?;
    let (_, false_hits) =
        segment_series(&pca.scores, still.calibration_end, &cfg, fs).map_err(|e| e.to_string())?;
    check(false_hits.is_empty(), format!("{} detections on a static trace", false_hits.len()))?;
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!(
        "mean IoU {iou:.3} over {} activities, 0 detections on {} static frames",
        truth.len(),
        still.trace.len()
    ))
}

// ---------------------------------------------------------------------------

struct Run {
    seed: u64,
    outcome: ExperimentOutcome,
    elapsed: Duration,
}

fn runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let start = Instant::now();
                let outcome =
                    run_experiment(seed, &ExperimentConfig::default(), 1).expect("experiment runs");
                let elapsed = start.elapsed();
                eprintln!("  experiment seed {seed} finished in {elapsed:.1?}");
                Run { seed, outcome, elapsed }
            })
            .collect()
    })
}

fn criterion_8() -> Outcome {
    let runs = runs();
    let mut accs: Vec<f64> = runs.iter().map(|r| r.outcome.report.source_holdout.accuracy).collect();
    let listed = format!("{accs:.3?}");
    let med = median(&mut accs);
    check(med >= 0.95, format!("median held-out accuracy {med:.3} {listed}"))?;
    for r in runs {
        let holdout = r.outcome.report.source_holdout.samples;
        check((145..=155).contains(&holdout), format!("seed {}: {holdout} held-out samples", r.seed))?;
        check(
            r.elapsed <= Duration::from_secs(600),
            format!("seed {}: experiment took {:.1?}", r.seed, r.elapsed),
        )?;
    }
    Ok(format!("median held-out accuracy {med:.3} {listed}"))
}

fn criterion_9() -> Outcome {
    let runs = runs();
    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    let mut lines = Vec::new();
    for target in ["B", "C"] {
        let collect = |f: &dyn Fn(&widur_core::experiment::ModelScores) -> f64| -> Result<f64, String> {
            let mut v = Vec::new();
            for r in runs {
                let t = r.outcome.report.target(target).ok_or(format!("seed {}: no target {target}", r.seed))?;
                v.push(f(&t.models));
            }
            Ok(median(&mut v))
        };
        let src = collect(&|m| m.source_only_cnn.accuracy)?;
        let tl = collect(&|m| m.tl_cnn.accuracy)?;
        let svm = collect(&|m| m.tl_cnn_svm.accuracy)?;
        let rf = collect(&|m| m.tl_cnn_rf.accuracy)?;
        let src_f1 = collect(&|m| m.source_only_cnn.macro_f1)?;
        let svm_f1 = collect(&|m| m.tl_cnn_svm.macro_f1)?;
        let summary = format!("{target}: source-only {src:.3}, TL {tl:.3}, TL+SVM {svm:.3}, TL+RF {rf:.3}");
        check(svm_f1 >= src_f1 + 0.05, format!("{summary}: macro F1 {svm_f1:.3} vs source-only {src_f1:.3}"))?;
        check(src + 0.05 <= tl, format!("{summary}: transfer gain below 0.05"))?;
        check(svm >= tl - 0.01, format!("{summary}: SVM head below TL CNN"))?;
        check(svm >= rf - 0.01, format!("{summary}: SVM head below RF head"))?;
        lines.push(summary);
    }
    check(total <= Duration::from_secs(1200), format!("5 experiments took {total:.1?}"))?;
    Ok(lines.join("; "))
}

fn criterion_10() -> Outcome {
    let runs = runs();
    let med = |mode: FeatureMode| -> Result<f64, String> {
        let mut v = Vec::new();
        for r in runs {
            let m = r.outcome.report.mode(mode).ok_or(format!("seed {}: no {mode:?} run", r.seed))?;
            v.push(m.source_holdout.accuracy);
        }
        Ok(median(&mut v))
    };
    let both = med(FeatureMode::Both)?;
    let stft_only = med(FeatureMode::Stft)?;
    let dwt_only = med(FeatureMode::Dwt)?;
    let summary = format!("combined {both:.3}, stft-only {stft_only:.3}, dwt-only {dwt_only:.3}");
    check(both >= stft_only.max(dwt_only) - 0.01, summary.clone())?;
    Ok(summary)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn criterion_11() -> Outcome {
    let mut checked = 0;
    for r in runs() {
        for mode in &r.outcome.report.ablation {
            for t in &mode.targets {
                check(
                    !t.conv_sha256_before.is_empty() && t.conv_sha256_before == t.conv_sha256_after,
                    format!("seed {} {:?} {}: conv digest changed", r.seed, mode.mode, t.target),
                )?;
                checked += 1;
            }
        }
        let source = r.outcome.source_model.conv_param_bytes();
        let source_sha = sha_hex(&source);
        for art in &r.outcome.targets {
            for (name, hybrid) in [("svm", &art.svm), ("rf", &art.rf)] {
                check(
                    hybrid.trunk.conv_param_bytes() == source,
                    format!("seed {} {} {name}: conv bytes differ from source", r.seed, art.target),
                )?;
            }
            let reported = r.outcome.report.target(&art.target).map(|t| t.conv_sha256_after.clone());
            check(
                reported.as_deref() == Some(source_sha.as_str()),
                format!("seed {} {}: reported digest differs from recomputed", r.seed, art.target),
            )?;
        }
    }
    Ok(format!("{checked} fine-tuning runs with unchanged conv digests"))
}

fn criterion_12() -> Outcome {
    let first = &runs()[0];
    let dir_a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir_b = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_outcome(&first.outcome, dir_a.path()).map_err(|e| e.to_string())?;
    let again = run_experiment(first.seed, &ExperimentConfig::default(), 1).map_err(|e| e.to_string())?;
    write_outcome(&again, dir_b.path()).map_err(|e| e.to_string())?;
    let a = std::fs::read(dir_a.path().join("metrics.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir_b.path().join("metrics.json")).map_err(|e| e.to_string())?;
    check(a == b, format!("metrics.json differs between runs ({} vs {} bytes)", a.len(), b.len()))?;
    Ok(format!("metrics.json identical ({} bytes, sha256 {})", a.len(), &sha_hex(&a)[..16]))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "sliding variance oracle", criterion_1),
        (2, "STFT oracle", criterion_2),
        (3, "DWT oracle", criterion_3),
        (4, "PCA oracle", criterion_4),
        (5, "gradient check", criterion_5),
        (6, "metric oracles", criterion_6),
        (7, "segmentation", criterion_7),
        (8, "in-domain learning", criterion_8),
        (9, "transfer ordering", criterion_9),
        (10, "ablation ordering", criterion_10),
        (11, "freeze contract", criterion_11),
        (12, "determinism", criterion_12),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail} [{took:.1?}]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {id:>2} ({name}): {detail} [{took:.1?}]");
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
