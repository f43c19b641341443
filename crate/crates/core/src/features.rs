//! Time-frequency features of a PC1 segment.
//!
//! Two views of each segment are computed: a Hann-windowed STFT power
//! spectrogram and a Daubechies-4 wavelet energy map on the signal
//! decimated to 100 Hz. Both are resampled onto fixed time grids so the
//! concatenated feature vector has 384 entries regardless of segment length.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi_model::Label;

pub const SPEC_SLOTS: usize = 16;
pub const SPEC_BINS: usize = 16;
pub const WAVELET_LEVELS: usize = 8;
pub const WAVELET_SLOTS: usize = 16;
pub const SPEC_LEN: usize = SPEC_SLOTS * SPEC_BINS;
pub const WAVELET_LEN: usize = WAVELET_LEVELS * WAVELET_SLOTS;
pub const FEATURE_LEN: usize = SPEC_LEN + WAVELET_LEN;

/// Power floor added before taking `log10`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Value of an all-zero cell after the log transform.
pub const LOG_ZERO: f64 = -12.0;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("series of length {len} is shorter than the required {required}")]
    SeriesTooShort { len: usize, required: usize },
    #[error("segment of padded length {len} is shorter than 2^{levels}")]
    SegmentTooShort { len: usize, levels: usize },
    #[error("wavelet input length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("spectrogram has no frames")]
    EmptySpectrogram,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("feature CSV row {row}: {msg}")]
    BadFeatureRow { row: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub kept_bins: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 64,
            hop: 32,
            kept_bins: 16,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !self.window_len.is_power_of_two() || self.window_len < 2 {
            return Err(FeatureError::InvalidConfig(
                "window_len must be a power of two".into(),
            ));
        }
        if self.hop < 1 || self.hop > self.window_len {
            return Err(FeatureError::InvalidConfig(
                "hop must be within 1..=window_len".into(),
            ));
        }
        if self.kept_bins < 1 || self.kept_bins > self.window_len / 2 + 1 {
            return Err(FeatureError::InvalidConfig(
                "kept_bins must be within 1..=window_len/2+1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwtConfig {
    pub levels_j: usize,
    pub pre_decimate: usize,
}

impl Default for DwtConfig {
    fn default() -> Self {
        DwtConfig {
            levels_j: WAVELET_LEVELS,
            pre_decimate: 2,
        }
    }
}

/// Which halves of the feature vector carry data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    Both,
    Stft,
    Dwt,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::Both, FeatureMode::Stft, FeatureMode::Dwt];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Both => "both",
            FeatureMode::Stft => "stft",
            FeatureMode::Dwt => "dwt",
        }
    }

    /// Overwrites the half that this mode drops with the log-zero value.
    pub fn apply(self, values: &mut [f64]) {
        match self {
            FeatureMode::Both => {}
            FeatureMode::Stft => values[SPEC_LEN..].fill(LOG_ZERO),
            FeatureMode::Dwt => values[..SPEC_LEN].fill(LOG_ZERO),
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureMode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown feature mode '{s}'"))
    }
}

/// Frame-index range a feature vector was extracted from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub trace_id: String,
    pub start_idx: usize,
    pub end_idx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source: Option<SegmentRef>,
}

// ---------------------------------------------------------------------------
// STFT

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (s, c) = (ang * k as f64).sin_cos();
                let a = start + k;
                let b = a + half;
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Full `N`-bin power spectrum `|DFT(window * frame)|^2`.
pub fn windowed_power_spectrum(frame: &[f64], window: &[f64]) -> Vec<f64> {
    let mut re: Vec<f64> = frame.iter().zip(window).map(|(x, w)| x * w).collect();
    let mut im = vec![0.0; re.len()];
    fft_in_place(&mut re, &mut im);
    re.iter().zip(&im).map(|(r, i)| r * r + i * i).collect()
}

/// Power spectrogram, one row per frame, `kept_bins` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub power: Vec<f64>,
}

impl Spectrogram {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.power[t * self.bins..(t + 1) * self.bins]
    }
}

pub fn stft(series: &[f64], cfg: &StftConfig) -> Result<Spectrogram, FeatureError> {
    cfg.validate()?;
    if series.len() < cfg.window_len {
        return Err(FeatureError::SeriesTooShort {
            len: series.len(),
            required: cfg.window_len,
        });
    }
    let window = hann(cfg.window_len);
    let frames = (series.len() - cfg.window_len) / cfg.hop + 1;
    let mut power = Vec::with_capacity(frames * cfg.kept_bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        let spec = windowed_power_spectrum(&series[start..start + cfg.window_len], &window);
        power.extend_from_slice(&spec[..cfg.kept_bins]);
    }
    Ok(Spectrogram {
        frames,
        bins: cfg.kept_bins,
        power,
    })
}

// ---------------------------------------------------------------------------
// DWT

/// Daubechies-4 (8-tap) scaling filter.
const DB4_LO: [f64; 8] = [
    0.230_377_813_308_896_5,
    0.714_846_570_552_915_4,
    0.630_880_767_929_858_7,
    -0.027_983_769_416_859_854,
    -0.187_034_811_719_093_1,
    0.030_841_381_835_560_764,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_032,
];

fn db4_hi() -> [f64; 8] {
    let mut g = [0.0; 8];
    for (n, v) in g.iter_mut().enumerate() {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        *v = sign * DB4_LO[7 - n];
    }
    g
}

/// Detail coefficients per level (index 0 is level 1) and the final
/// approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwtCoeffs {
    pub details: Vec<Vec<f64>>,
    pub approx: Vec<f64>,
}

fn analysis_step(x: &[f64], lo: &[f64; 8], hi: &[f64; 8]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    for k in 0..half {
        let (mut sa, mut sd) = (0.0, 0.0);
        for t in 0..8 {
            let v = x[(2 * k + t) % n];
            sa += lo[t] * v;
            sd += hi[t] * v;
        }
        a[k] = sa;
        d[k] = sd;
    }
    (a, d)
}

fn synthesis_step(a: &[f64], d: &[f64], lo: &[f64; 8], hi: &[f64; 8]) -> Vec<f64> {
    let n = a.len() * 2;
    let mut x = vec![0.0; n];
    for k in 0..a.len() {
        for t in 0..8 {
            x[(2 * k + t) % n] += lo[t] * a[k] + hi[t] * d[k];
        }
    }
    x
}

/// Periodized Mallat pyramid with Daubechies-4 filters.
pub fn dwt_multilevel(series: &[f64], levels: usize) -> Result<DwtCoeffs, FeatureError> {
    if levels < 1 {
        return Err(FeatureError::InvalidConfig("levels must be >= 1".into()));
    }
    if series.len() < (1 << levels) {
        return Err(FeatureError::SegmentTooShort {
            len: series.len(),
            levels,
        });
    }
    if !series.len().is_power_of_two() {
        return Err(FeatureError::NotPowerOfTwo(series.len()));
    }
    let hi = db4_hi();
    let mut approx = series.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = analysis_step(&approx, &DB4_LO, &hi);
        details.push(d);
        approx = a;
    }
    Ok(DwtCoeffs { details, approx })
}

/// Inverse of [`dwt_multilevel`].
pub fn idwt_multilevel(coeffs: &DwtCoeffs) -> Vec<f64> {
    let hi = db4_hi();
    let mut x = coeffs.approx.clone();
    for d in coeffs.details.iter().rev() {
        x = synthesis_step(&x, d, &DB4_LO, &hi);
    }
    x
}

/// Decimates a 200 Hz segment and edge-pads it to the next power of two
/// (at least `2^levels`). Returns the padded signal and the unpadded length.
pub fn prepare_wavelet_input(segment: &[f64], cfg: &DwtConfig) -> (Vec<f64>, usize) {
    let step = cfg.pre_decimate.max(1);
    let mut x: Vec<f64> = segment.iter().step_by(step).copied().collect();
    let len = x.len();
    let target = len.max(1 << cfg.levels_j).next_power_of_two();
    let last = x.last().copied().unwrap_or(0.0);
    x.resize(target, last);
    (x, len)
}

/// Frequency band `(lo, hi)` in Hz covered by detail level `level`.
pub fn level_band(level: u32, fs_effective: f64) -> (f64, f64) {
    let hi = fs_effective / 2f64.powi(level as i32);
    (hi / 2.0, hi)
}

/// Radial speed (m/s) producing Doppler shift `freq_hz` at the given carrier.
pub fn speed_of(freq_hz: f64, carrier_ghz: f64) -> f64 {
    let wavelength = SPEED_OF_LIGHT / (carrier_ghz * 1e9);
    freq_hz * wavelength / 2.0
}

// ---------------------------------------------------------------------------
// Fixed grids

/// Averages `values` (cell `k` spans `[k, k+1)`) over `slots` equal slots
/// of `[0, extent)`.
pub fn area_average(values: &[f64], extent: f64, slots: usize) -> Vec<f64> {
    let width = extent / slots as f64;
    (0..slots)
        .map(|s| {
            let lo = s as f64 * width;
            let hi = lo + width;
            let first = lo.floor() as usize;
            let mut acc = 0.0;
            let mut k = first;
            while (k as f64) < hi && k < values.len() {
                let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                acc += values[k] * overlap;
                k += 1;
            }
            acc / width
        })
        .collect()
}

/// Log-power spectrogram averaged onto 16 time slots, flattened time-major.
pub fn spectrogram_grid(spec: &Spectrogram) -> Result<Vec<f64>, FeatureError> {
    if spec.frames == 0 {
        return Err(FeatureError::EmptySpectrogram);
    }
    if spec.bins != SPEC_BINS {
        return Err(FeatureError::InvalidConfig(format!(
            "spectrogram grid needs {SPEC_BINS} bins, got {}",
            spec.bins
        )));
    }
    let mut out = vec![0.0; SPEC_LEN];
    let mut column = vec![0.0; spec.frames];
    for f in 0..SPEC_BINS {
        for (t, c) in column.iter_mut().enumerate() {
            *c = (spec.power[t * spec.bins + f] + LOG_FLOOR).log10();
        }
        for (s, v) in area_average(&column, spec.frames as f64, SPEC_SLOTS)
            .into_iter()
            .enumerate()
        {
            out[s * SPEC_BINS + f] = v;
        }
    }
    Ok(out)
}

/// Mean squared detail coefficient per level over 16 time slots of the
/// unpadded extent, before the log transform. Level-major.
pub fn wavelet_energy_linear(coeffs: &DwtCoeffs, unpadded_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(WAVELET_LEN);
    for (j, d) in coeffs.details.iter().take(WAVELET_LEVELS).enumerate() {
        let energy: Vec<f64> = d.iter().map(|c| c * c).collect();
        let extent = (unpadded_len as f64 / 2f64.powi(j as i32 + 1)).min(d.len() as f64);
        out.extend(area_average(&energy, extent, WAVELET_SLOTS));
    }
    out.resize(WAVELET_LEN, 0.0);
    out
}

/// Log energy map, 8 levels x 16 slots, level-major.
pub fn wavelet_energy_map(coeffs: &DwtCoeffs, unpadded_len: usize) -> Vec<f64> {
    wavelet_energy_linear(coeffs, unpadded_len)
        .into_iter()
        .map(|e| (e + LOG_FLOOR).log10())
        .collect()
}

/// Minimum 200 Hz segment length accepted by [`assemble_feature_vector`].
pub fn min_segment_len(stft_cfg: &StftConfig, dwt_cfg: &DwtConfig) -> usize {
    stft_cfg.window_len.max(2 << dwt_cfg.levels_j)
}

/// Spectrogram grid followed by the wavelet energy map (384 values).
pub fn assemble_feature_vector(
    segment: &[f64],
    stft_cfg: &StftConfig,
    dwt_cfg: &DwtConfig,
    mode: FeatureMode,
) -> Result<FeatureVector, FeatureError> {
    if dwt_cfg.levels_j != WAVELET_LEVELS {
        return Err(FeatureError::InvalidConfig(format!(
            "energy map needs {WAVELET_LEVELS} levels"
        )));
    }
    let required = min_segment_len(stft_cfg, dwt_cfg);
    if segment.len() < required {
        return Err(FeatureError::SeriesTooShort {
            len: segment.len(),
            required,
        });
    }
    let spec = stft(segment, stft_cfg)?;
    let mut values = spectrogram_grid(&spec)?;
    let (padded, len) = prepare_wavelet_input(segment, dwt_cfg);
    let coeffs = dwt_multilevel(&padded, dwt_cfg.levels_j)?;
    values.extend(wavelet_energy_map(&coeffs, len));
    mode.apply(&mut values);
    debug_assert_eq!(values.len(), FEATURE_LEN);
    Ok(FeatureVector {
        values,
        source: None,
    })
}

// ---------------------------------------------------------------------------
// Feature CSV interchange

pub fn feature_header() -> String {
    let mut h = String::new();
    for i in 0..FEATURE_LEN {
        write!(h, "f{i:03},").unwrap();
    }
    h.push_str("label");
    h
}

pub fn write_feature_csv(rows: &[(FeatureVector, Label)]) -> String {
    let mut s = feature_header();
    s.push('\n');
    for (fv, label) in rows {
        for v in &fv.values {
            write!(s, "{v},").unwrap();
        }
        s.push_str(label.as_str());
        s.push('\n');
    }
    s
}

pub fn parse_feature_csv(text: &str) -> Result<Vec<(FeatureVector, Label)>, FeatureError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().unwrap_or("");
    if header.trim() != feature_header() {
        return Err(FeatureError::BadFeatureRow {
            row: 0,
            msg: "unexpected header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != FEATURE_LEN + 1 {
            return Err(FeatureError::BadFeatureRow {
                row,
                msg: format!("expected {} fields, found {}", FEATURE_LEN + 1, fields.len()),
            });
        }
        let values = fields[..FEATURE_LEN]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| FeatureError::BadFeatureRow {
                        row,
                        msg: format!("bad value '{f}'"),
                    })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let label = fields[FEATURE_LEN]
            .trim()
            .parse::<Label>()
            .map_err(|_| FeatureError::BadFeatureRow {
                row,
                msg: format!("unknown label '{}'", fields[FEATURE_LEN]),
            })?;
        out.push((
            FeatureVector {
                values,
                source: None,
            },
            label,
        ));
    }
    Ok(out)
}
