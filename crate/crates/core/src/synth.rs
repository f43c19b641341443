//! Synthetic CSI traces with known activity intervals.
//!
//! A trace is a static per-subcarrier baseline plus Gaussian noise. Each
//! activity adds chirped sinusoidal bursts, weighted per subcarrier, under a
//! tapered envelope. Domains differ in baseline, noise level, burst gain and
//! a frequency scale factor. Everything is driven by a ChaCha8 generator
//! seeded from the domain spec, so identical configs give identical traces.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi_model::{
    CsiError, CsiFrame, CsiTrace, Label, LabeledInterval, TraceManifest, NUM_SUBCARRIERS,
};

/// Longest trace the generator will plan, in seconds of activity.
pub const MAX_ACTIVITY_SECONDS: f64 = 7200.0;
/// Generated traces are sampled at this rate.
pub const SYNTH_RATE_HZ: f64 = 200.0;
/// Frequencies must stay below the Nyquist rate of the decimated signal.
pub const MAX_COMPONENT_HZ: f64 = 50.0;
/// Length of the raised-cosine ramp at each end of a burst.
const RAMP_S: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("scenario needs up to {required_s:.0} s of activity, limit is {limit_s:.0} s")]
    ConfigInfeasible { required_s: f64, limit_s: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trace(#[from] CsiError),
}

/// One chirped sinusoid within an activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChirpComponent {
    pub start_hz: f64,
    pub end_hz: f64,
    pub amplitude: f64,
    /// Body-part coupling per subcarrier.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub label: Label,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Per-instance multiplicative jitter on frequencies and amplitudes.
    pub jitter: f64,
    pub components: Vec<ChirpComponent>,
}

impl ActivityProfile {
    pub fn max_frequency_hz(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.start_hz.max(c.end_hz))
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(format!("{}: {m}", self.label)));
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) {
            return bad("durations must be positive and ordered");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1)");
        }
        for c in &self.components {
            if c.weights.len() != NUM_SUBCARRIERS {
                return bad("component weights need one entry per subcarrier");
            }
            let top = c.start_hz.max(c.end_hz) * (1.0 + self.jitter);
            if !(c.start_hz > 0.0 && c.end_hz > 0.0) || top >= MAX_COMPONENT_HZ {
                return bad("component frequencies must lie in (0, 50) Hz");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub baseline: Vec<f64>,
    pub noise_sigma: f64,
    pub gain: f64,
    pub freq_scale: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Domain with a seeded random baseline between 25 and 40.
    pub fn new(domain_id: impl Into<String>, seed: u64) -> DomainSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
        DomainSpec {
            domain_id: domain_id.into(),
            baseline: (0..NUM_SUBCARRIERS)
                .map(|_| rng.random_range(25.0..40.0))
                .collect(),
            noise_sigma: 1.0,
            gain: 1.0,
            freq_scale: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.baseline.len() != NUM_SUBCARRIERS || self.baseline.iter().any(|b| !b.is_finite()) {
            return Err(SynthError::InvalidConfig(
                "baseline needs 30 finite entries".into(),
            ));
        }
        if !(self.noise_sigma > 0.0) || !(self.gain > 0.0) {
            return Err(SynthError::InvalidConfig(
                "noise_sigma and gain must be positive".into(),
            ));
        }
        if !(0.5..=2.0).contains(&self.freq_scale) {
            return Err(SynthError::InvalidConfig(
                "freq_scale must lie in [0.5, 2]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub domain: DomainSpec,
    /// Segment counts indexed by [`Label::index`].
    pub counts: [usize; Label::COUNT],
    pub gap_range_s: (f64, f64),
    pub calibration_s: f64,
    pub profiles: Vec<ActivityProfile>,
}

impl ScenarioConfig {
    pub fn new(domain: DomainSpec, counts: [usize; Label::COUNT]) -> ScenarioConfig {
        ScenarioConfig {
            domain,
            counts,
            gap_range_s: (1.0, 2.0),
            calibration_s: 10.0,
            profiles: default_profiles(),
        }
    }

    pub fn total_segments(&self) -> usize {
        self.counts.iter().sum()
    }

    fn profile(&self, label: Label) -> Option<&ActivityProfile> {
        self.profiles.iter().find(|p| p.label == label)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.domain.validate()?;
        if !(self.calibration_s >= 5.0) {
            return Err(SynthError::InvalidConfig("calibration must be >= 5 s".into()));
        }
        let (g0, g1) = self.gap_range_s;
        if !(g0 >= 0.0 && g1 >= g0) {
            return Err(SynthError::InvalidConfig("gap range must be ordered and >= 0".into()));
        }
        let mut required = 0.0;
        for label in Label::ALL {
            let count = self.counts[label.index()];
            if count == 0 {
                continue;
            }
            let p = self.profile(label).ok_or_else(|| {
                SynthError::InvalidConfig(format!("no profile for label {label}"))
            })?;
            p.validate()?;
            required += count as f64 * p.max_duration_s;
        }
        if required > MAX_ACTIVITY_SECONDS {
            return Err(SynthError::ConfigInfeasible {
                required_s: required,
                limit_s: MAX_ACTIVITY_SECONDS,
            });
        }
        Ok(())
    }
}

/// A generated trace with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub trace: CsiTrace,
    pub intervals: Vec<LabeledInterval>,
    /// Frames `[0, calibration_end)` are guaranteed static.
    pub calibration_end: usize,
}

/// Smooth subcarrier coupling pattern.
fn coupling(period: f64, phase: f64, floor: f64) -> Vec<f64> {
    (0..NUM_SUBCARRIERS)
        .map(|k| {
            let x = 2.0 * std::f64::consts::PI * k as f64 / period + phase;
            floor + (1.0 - floor) * 0.5 * (1.0 + x.cos())
        })
        .collect()
}

fn chirp(start_hz: f64, end_hz: f64, amplitude: f64, weights: Vec<f64>) -> ChirpComponent {
    ChirpComponent {
        start_hz,
        end_hz,
        amplitude,
        weights,
    }
}

/// Profiles for the five classes.
pub fn default_profiles() -> Vec<ActivityProfile> {
    vec![
        ActivityProfile {
            label: Label::Empty,
            min_duration_s: 2.0,
            max_duration_s: 3.0,
            jitter: 0.0,
            components: Vec::new(),
        },
        ActivityProfile {
            label: Label::Sit,
            min_duration_s: 2.0,
            max_duration_s: 3.5,
            jitter: 0.1,
            components: vec![chirp(0.5, 2.0, 2.5, coupling(40.0, 0.3, 0.5))],
        },
        ActivityProfile {
            label: Label::Dress,
            min_duration_s: 2.0,
            max_duration_s: 8.0,
            jitter: 0.1,
            components: vec![
                chirp(1.0, 7.0, 3.0, coupling(25.0, 1.0, 0.4)),
                chirp(0.5, 3.0, 1.5, coupling(18.0, 2.2, 0.3)),
            ],
        },
        ActivityProfile {
            label: Label::Undress,
            min_duration_s: 2.0,
            max_duration_s: 4.0,
            jitter: 0.1,
            components: vec![
                chirp(2.0, 8.0, 5.5, coupling(25.0, 1.0, 0.4)),
                chirp(1.0, 3.5, 2.5, coupling(18.0, 2.2, 0.3)),
            ],
        },
        ActivityProfile {
            label: Label::Other,
            min_duration_s: 3.0,
            max_duration_s: 6.0,
            jitter: 0.1,
            components: vec![
                chirp(1.0, 4.0, 2.5, coupling(30.0, 5.0, 0.3)),
                chirp(6.0, 9.0, 2.0, coupling(20.0, 3.0, 0.3)),
                chirp(13.0, 10.0, 2.0, coupling(15.0, 1.5, 0.3)),
            ],
        },
    ]
}

/// Tukey-style envelope: raised-cosine ramps of [`RAMP_S`] at both ends.
fn envelope(t: f64, duration: f64) -> f64 {
    let ramp = RAMP_S.min(duration / 4.0);
    let edge = t.min(duration - t);
    if edge >= ramp {
        1.0
    } else if edge <= 0.0 {
        0.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * edge / ramp).cos())
    }
}

/// Adds one activity instance to the `[start, start + len)` frames.
fn add_burst(
    signal: &mut [f64],
    start: usize,
    len: usize,
    profile: &ActivityProfile,
    domain: &DomainSpec,
    rng: &mut ChaCha8Rng,
) {
    let duration = len as f64 / SYNTH_RATE_HZ;
    for comp in &profile.components {
        let j = profile.jitter;
        let f_jit = 1.0 + rng.random_range(-j..=j);
        let a_jit = 1.0 + rng.random_range(-j..=j);
        let phase0 = rng.random_range(0.0..1.0);
        let f0 = comp.start_hz * f_jit * domain.freq_scale;
        let f1 = comp.end_hz * f_jit * domain.freq_scale;
        let amp = comp.amplitude * a_jit * domain.gain;
        for i in 0..len {
            let t = i as f64 / SYNTH_RATE_HZ;
            let cycles = phase0 + f0 * t + (f1 - f0) * t * t / (2.0 * duration);
            let v = amp * envelope(t, duration) * (2.0 * std::f64::consts::PI * cycles).sin();
            let row = &mut signal[(start + i) * NUM_SUBCARRIERS..(start + i + 1) * NUM_SUBCARRIERS];
            for (s, w) in row.iter_mut().zip(&comp.weights) {
                *s += v * w;
            }
        }
    }
}

fn uniform_frames(rng: &mut ChaCha8Rng, lo_s: f64, hi_s: f64) -> usize {
    let s = if hi_s > lo_s {
        rng.random_range(lo_s..=hi_s)
    } else {
        lo_s
    };
    (s * SYNTH_RATE_HZ).round() as usize
}

/// Generates a trace with shuffled activities separated by static gaps.
///
/// Empty segments are labeled windows where nothing is added.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let domain = &cfg.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(domain.seed);

    let mut order: Vec<Label> = Label::ALL
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, cfg.counts[l.index()]))
        .collect();
    order.shuffle(&mut rng);

    let calibration_end = (cfg.calibration_s * SYNTH_RATE_HZ).round() as usize;
    let mut plan = Vec::with_capacity(order.len());
    let mut cursor = calibration_end;
    for &label in &order {
        cursor += uniform_frames(&mut rng, cfg.gap_range_s.0, cfg.gap_range_s.1);
        let p = cfg.profile(label).expect("validated");
        let len = uniform_frames(&mut rng, p.min_duration_s, p.max_duration_s).max(1);
        plan.push((cursor, len, label));
        cursor += len;
    }
    let total = cursor + uniform_frames(&mut rng, cfg.gap_range_s.0, cfg.gap_range_s.1).max(1);

    let mut signal = vec![0.0; total * NUM_SUBCARRIERS];
    let mut intervals = Vec::with_capacity(plan.len());
    for &(start, len, label) in &plan {
        let p = cfg.profile(label).expect("validated");
        add_burst(&mut signal, start, len, p, domain, &mut rng);
        intervals.push(LabeledInterval {
            start_idx: start,
            end_idx: start + len,
            label,
        });
    }

    let noise = Normal::new(0.0, domain.noise_sigma)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let mut frames = Vec::with_capacity(total);
    for i in 0..total {
        let mut amplitudes = [0.0; NUM_SUBCARRIERS];
        for (k, a) in amplitudes.iter_mut().enumerate() {
            let v = domain.baseline[k] + signal[i * NUM_SUBCARRIERS + k] + noise.sample(&mut rng);
            *a = v.max(0.0);
        }
        frames.push(CsiFrame {
            timestamp_s: i as f64 / SYNTH_RATE_HZ,
            amplitudes,
        });
    }
    let mut manifest = TraceManifest::new(domain.domain_id.clone(), format!("{}-{}", domain.domain_id, domain.seed));
    manifest.sampling_rate_hz = SYNTH_RATE_HZ;
    let trace = CsiTrace::new(manifest, frames)?;
    Ok(Scenario {
        trace,
        intervals,
        calibration_end,
    })
}

/// Splits `total` in proportion to `weights`, largest remainder first
/// (ties to the lower index).
pub fn proportional_counts(weights: &[usize; Label::COUNT], total: usize) -> [usize; Label::COUNT] {
    let sum: usize = weights.iter().sum();
    let mut counts = [0usize; Label::COUNT];
    let mut remainders = Vec::with_capacity(Label::COUNT);
    for (i, &w) in weights.iter().enumerate() {
        let exact = w * total;
        counts[i] = exact / sum;
        remainders.push((exact % sum, i));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - counts.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Per-subject class counts of the original recordings (empty, sit, dress,
/// undress, other).
pub const SUBJECT_A_COUNTS: [usize; 5] = [848, 852, 540, 541, 854];
pub const SUBJECT_B_COUNTS: [usize; 5] = [150, 150, 96, 96, 150];
pub const SUBJECT_C_COUNTS: [usize; 5] = [150, 134, 79, 75, 150];

/// Source domain plus a mildly and a strongly shifted target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferBenchmark {
    pub source: ScenarioConfig,
    pub target_b: ScenarioConfig,
    pub target_c: ScenarioConfig,
}

impl TransferBenchmark {
    pub fn targets(&self) -> [(&'static str, &ScenarioConfig); 2] {
        [("B", &self.target_b), ("C", &self.target_c)]
    }
}

pub fn make_transfer_benchmark(seed: u64) -> TransferBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: [u64; 3] = [rng.random(), rng.random(), rng.random()];

    let source = DomainSpec::new("A", seeds[0]);

    let mut b = DomainSpec::new("B", seeds[1]);
    b.gain = 0.5;
    b.freq_scale = 0.95;
    b.noise_sigma = 1.1;

    let mut c = DomainSpec::new("C", seeds[2]);
    c.gain = 0.5;
    c.freq_scale = 0.8;
    c.noise_sigma = 1.5;

    TransferBenchmark {
        source: ScenarioConfig::new(source, proportional_counts(&SUBJECT_A_COUNTS, 1500)),
        target_b: ScenarioConfig::new(b, proportional_counts(&SUBJECT_B_COUNTS, 300)),
        target_c: ScenarioConfig::new(c, proportional_counts(&SUBJECT_C_COUNTS, 250)),
    }
}

/// Symmetric KL divergence between per-class diagonal Gaussians fitted to
/// two labeled feature sets, averaged over classes present in both.
pub fn feature_shift(a: &[(&[f64], usize)], b: &[(&[f64], usize)]) -> f64 {
    const VAR_FLOOR: f64 = 1e-6;
    let fit = |rows: &[(&[f64], usize)], class: usize| -> Option<(Vec<f64>, Vec<f64>)> {
        let xs: Vec<&[f64]> = rows.iter().filter(|r| r.1 == class).map(|r| r.0).collect();
        let dim = xs.first()?.len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n).collect();
        let var = (0..dim)
            .map(|k| (xs.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n).max(VAR_FLOOR))
            .collect();
        Some((mean, var))
    };
    let mut total = 0.0;
    let mut classes = 0;
    for class in 0..Label::COUNT {
        let (Some((ma, va)), Some((mb, vb))) = (fit(a, class), fit(b, class)) else {
            continue;
        };
        let kl: f64 = (0..ma.len())
            .map(|k| {
                let d2 = (ma[k] - mb[k]).powi(2);
                0.5 * ((va[k] + d2) / vb[k] + (vb[k] + d2) / va[k]) - 1.0
            })
            .sum();
        total += kl;
        classes += 1;
    }
    if classes == 0 {
        0.0
    } else {
        total / classes as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, counts: [usize; 5]) -> ScenarioConfig {
        ScenarioConfig::new(DomainSpec::new("T", seed), counts)
    }

    #[test]
    fn profiles_respect_documented_ranges() {
        let profiles = default_profiles();
        let get = |l: Label| profiles.iter().find(|p| p.label == l).unwrap();
        assert!(get(Label::Dress).max_frequency_hz() <= 8.0);
        let undress = get(Label::Undress);
        assert!(undress.min_duration_s >= 2.0 && undress.max_duration_s <= 4.0);
        let dress = get(Label::Dress);
        assert!(dress.min_duration_s >= 2.0 && dress.max_duration_s <= 8.0);
        for p in &profiles {
            assert!(p.max_frequency_hz() * (1.0 + p.jitter) < MAX_COMPONENT_HZ);
            p.validate().unwrap();
        }
    }

    #[test]
    fn bookkeeping_matches_counts() {
        let s = generate_scenario(&small(1, [10, 10, 10, 10, 10])).unwrap();
        assert_eq!(s.intervals.len(), 50);
        for l in Label::ALL {
            assert_eq!(s.intervals.iter().filter(|i| i.label == l).count(), 10);
        }
        let activity = s.intervals.iter().filter(|i| i.label != Label::Empty).count();
        assert_eq!(activity, 40);
        for w in s.intervals.windows(2) {
            assert!(w[0].end_idx + 200 <= w[1].start_idx);
        }
        assert!(s.intervals[0].start_idx >= s.calibration_end);
        assert!(s.intervals.last().unwrap().end_idx < s.trace.len());
    }

    #[test]
    fn same_seed_same_trace() {
        let a = generate_scenario(&small(3, [2, 2, 2, 2, 2])).unwrap();
        let b = generate_scenario(&small(3, [2, 2, 2, 2, 2])).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&small(4, [2, 2, 2, 2, 2])).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let cfg = small(1, [0, 0, 1000, 0, 0]);
        assert!(matches!(
            generate_scenario(&cfg),
            Err(SynthError::ConfigInfeasible { .. })
        ));
    }

    #[test]
    fn invalid_domains_are_rejected() {
        let mut cfg = small(1, [1, 1, 1, 1, 1]);
        cfg.domain.freq_scale = 3.0;
        assert!(matches!(generate_scenario(&cfg), Err(SynthError::InvalidConfig(_))));
        let mut cfg = small(1, [1, 1, 1, 1, 1]);
        cfg.calibration_s = 2.0;
        assert!(matches!(generate_scenario(&cfg), Err(SynthError::InvalidConfig(_))));
    }

    #[test]
    fn benchmark_counts() {
        let bench = make_transfer_benchmark(42);
        assert_eq!(bench.source.total_segments(), 1500);
        assert_eq!(bench.target_b.total_segments(), 300);
        assert_eq!(bench.target_c.total_segments(), 250);
        assert_eq!(bench.target_b.counts, [70, 70, 45, 45, 70]);
        for cfg in [&bench.source, &bench.target_b, &bench.target_c] {
            cfg.validate().unwrap();
        }
        let ratio = bench.target_b.domain.noise_sigma / bench.source.domain.noise_sigma;
        assert!((0.8..=1.2).contains(&ratio));
        assert_eq!(bench.target_c.domain.freq_scale, 0.8);
        assert_eq!(bench, make_transfer_benchmark(42));
    }

    #[test]
    fn largest_remainder_split() {
        assert_eq!(proportional_counts(&[1, 1, 1, 0, 0], 10), [4, 3, 3, 0, 0]);
        assert_eq!(proportional_counts(&SUBJECT_C_COUNTS, 250).iter().sum::<usize>(), 250);
    }

    #[test]
    fn shift_of_identical_sets_is_zero() {
        let rows: Vec<(Vec<f64>, usize)> =
            (0..20).map(|i| (vec![i as f64, (i * i) as f64], i % 2)).collect();
        let r: Vec<(&[f64], usize)> = rows.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        assert!(feature_shift(&r, &r).abs() < 1e-12);
        let shifted: Vec<(Vec<f64>, usize)> =
            rows.iter().map(|(x, y)| (vec![x[0] + 3.0, x[1]], *y)).collect();
        let s: Vec<(&[f64], usize)> = shifted.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        assert!(feature_shift(&r, &s) > 0.0);
    }
}
