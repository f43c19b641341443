//! CSI trace data model and the canonical text formats.
//!
//! A trace is a CSV file (`timestamp_s,sc00,...,sc29`, one row per packet)
//! next to a JSON manifest. Labels are a separate CSV of frame-index
//! intervals. Floats are written in shortest round-trip decimal form, so
//! `parse_trace(write_trace(t)) == t` holds bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Subcarriers reported per packet.
pub const NUM_SUBCARRIERS: usize = 30;

/// Allowed relative deviation of a frame gap from `1 / sampling_rate_hz`.
pub const MAX_SPACING_JITTER: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum CsiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    WrongFieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: cannot parse '{text}' as a number")]
    BadNumber { row: usize, text: String },
    #[error("row {row}: non-finite or negative value in column '{column}'")]
    NonFiniteValue { row: usize, column: String },
    #[error("row {row}: timestamp does not increase")]
    NonMonotonicTimestamp { row: usize },
    #[error("row {row}: frame gap {gap_s} s deviates more than 20% from the nominal spacing")]
    IrregularSpacing { row: usize, gap_s: f64 },
    #[error("trace has no frames")]
    EmptyTrace,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("row {row}: unknown label '{label}'")]
    UnknownLabel { row: usize, label: String },
    #[error("row {row}: interval [{start}, {end}) outside trace of {frames} frames")]
    IntervalOutOfRange {
        row: usize,
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("row {row}: interval overlaps an earlier interval")]
    OverlappingIntervals { row: usize },
}

/// Activity classes, in the column order of the collected dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Empty,
    Sit,
    Dress,
    Undress,
    Other,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::Empty,
        Label::Sit,
        Label::Dress,
        Label::Undress,
        Label::Other,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Label> {
        Self::ALL.get(idx).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Empty => "empty",
            Label::Sit => "sit",
            Label::Dress => "dress",
            Label::Undress => "undress",
            Label::Other => "other",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL.iter().copied().find(|l| l.as_str() == s).ok_or(())
    }
}

/// One received packet: its timestamp and per-subcarrier linear magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsiFrame {
    pub timestamp_s: f64,
    pub amplitudes: [f64; NUM_SUBCARRIERS],
}

fn default_rate() -> f64 {
    200.0
}

fn default_carrier() -> f64 {
    2.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    #[serde(default = "default_rate")]
    pub sampling_rate_hz: f64,
    #[serde(default = "default_carrier")]
    pub carrier_freq_ghz: f64,
    pub domain_id: String,
    pub trace_id: String,
}

impl TraceManifest {
    pub fn new(domain_id: impl Into<String>, trace_id: impl Into<String>) -> Self {
        TraceManifest {
            sampling_rate_hz: default_rate(),
            carrier_freq_ghz: default_carrier(),
            domain_id: domain_id.into(),
            trace_id: trace_id.into(),
        }
    }

    fn validate(&self) -> Result<(), CsiError> {
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(CsiError::InvalidManifest(
                "sampling_rate_hz must be positive".into(),
            ));
        }
        if !(self.carrier_freq_ghz.is_finite() && self.carrier_freq_ghz > 0.0) {
            return Err(CsiError::InvalidManifest(
                "carrier_freq_ghz must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A validated, immutable CSI stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTrace {
    manifest: TraceManifest,
    frames: Vec<CsiFrame>,
}

impl CsiTrace {
    /// Validates manifest, amplitudes, ordering and spacing. Row numbers in
    /// errors are 1-based frame positions.
    pub fn new(manifest: TraceManifest, frames: Vec<CsiFrame>) -> Result<Self, CsiError> {
        manifest.validate()?;
        if frames.is_empty() {
            return Err(CsiError::EmptyTrace);
        }
        let nominal = 1.0 / manifest.sampling_rate_hz;
        for (i, frame) in frames.iter().enumerate() {
            let row = i + 1;
            if !frame.timestamp_s.is_finite() {
                return Err(CsiError::NonFiniteValue {
                    row,
                    column: "timestamp_s".into(),
                });
            }
            if let Some(k) = frame
                .amplitudes
                .iter()
                .position(|a| !a.is_finite() || *a < 0.0)
            {
                return Err(CsiError::NonFiniteValue {
                    row,
                    column: subcarrier_column(k),
                });
            }
            if i > 0 {
                let gap = frame.timestamp_s - frames[i - 1].timestamp_s;
                if gap <= 0.0 {
                    return Err(CsiError::NonMonotonicTimestamp { row });
                }
                if (gap - nominal).abs() > MAX_SPACING_JITTER * nominal {
                    return Err(CsiError::IrregularSpacing { row, gap_s: gap });
                }
            }
        }
        Ok(CsiTrace { manifest, frames })
    }

    pub fn manifest(&self) -> &TraceManifest {
        &self.manifest
    }

    pub fn frames(&self) -> &[CsiFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.manifest.sampling_rate_hz
    }

    /// Amplitudes of one subcarrier over time.
    pub fn subcarrier(&self, k: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.amplitudes[k]).collect()
    }

    /// Sub-trace `[start, end)` with the same manifest.
    pub fn slice(&self, start: usize, end: usize) -> Result<CsiTrace, CsiError> {
        if start >= end || end > self.frames.len() {
            return Err(CsiError::IntervalOutOfRange {
                row: 0,
                start,
                end,
                frames: self.frames.len(),
            });
        }
        Ok(CsiTrace {
            manifest: self.manifest.clone(),
            frames: self.frames[start..end].to_vec(),
        })
    }
}

/// A labeled frame-index interval `[start_idx, end_idx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInterval {
    pub start_idx: usize,
    pub end_idx: usize,
    pub label: Label,
}

impl LabeledInterval {
    pub fn len(&self) -> usize {
        self.end_idx - self.start_idx
    }

    pub fn is_empty(&self) -> bool {
        self.end_idx <= self.start_idx
    }
}

fn subcarrier_column(k: usize) -> String {
    format!("sc{k:02}")
}

pub fn trace_header() -> String {
    let mut h = String::from("timestamp_s");
    for k in 0..NUM_SUBCARRIERS {
        h.push(',');
        h.push_str(&subcarrier_column(k));
    }
    h
}

fn parse_number(text: &str, row: usize) -> Result<f64, CsiError> {
    text.trim().parse::<f64>().map_err(|_| CsiError::BadNumber {
        row,
        text: text.to_string(),
    })
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.trim().is_empty())
}

/// Parses a trace CSV plus its JSON manifest.
pub fn parse_trace(csv_text: &str, manifest_text: &str) -> Result<CsiTrace, CsiError> {
    let manifest: TraceManifest = serde_json::from_str(manifest_text)
        .map_err(|e| CsiError::InvalidManifest(e.to_string()))?;
    let mut lines = data_lines(csv_text);
    let header = lines
        .next()
        .ok_or_else(|| CsiError::MalformedHeader("empty input".into()))?;
    let expected = trace_header();
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected_cols: Vec<&str> = expected.split(',').collect();
    if cols != expected_cols {
        return Err(CsiError::MalformedHeader(format!(
            "expected {} columns '{}', found {} columns",
            expected_cols.len(),
            expected,
            cols.len()
        )));
    }

    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != NUM_SUBCARRIERS + 1 {
            return Err(CsiError::WrongFieldCount {
                row,
                expected: NUM_SUBCARRIERS + 1,
                found: fields.len(),
            });
        }
        let timestamp_s = parse_number(fields[0], row)?;
        let mut amplitudes = [0.0; NUM_SUBCARRIERS];
        for (slot, field) in amplitudes.iter_mut().zip(&fields[1..]) {
            *slot = parse_number(field, row)?;
        }
        frames.push(CsiFrame {
            timestamp_s,
            amplitudes,
        });
    }
    CsiTrace::new(manifest, frames)
}

/// Serializes a trace into `(csv_text, manifest_json)`.
pub fn write_trace(trace: &CsiTrace) -> (String, String) {
    use std::fmt::Write;

    let mut csv = trace_header();
    csv.push('\n');
    for frame in &trace.frames {
        write!(csv, "{}", frame.timestamp_s).unwrap();
        for a in &frame.amplitudes {
            write!(csv, ",{a}").unwrap();
        }
        csv.push('\n');
    }
    let manifest = serde_json::to_string_pretty(&trace.manifest).expect("manifest serializes");
    (csv, manifest)
}

/// Parses a labels CSV and validates it against `trace`.
pub fn parse_labels(csv_text: &str, trace: &CsiTrace) -> Result<Vec<LabeledInterval>, CsiError> {
    parse_labels_for_len(csv_text, trace.len())
}

pub fn parse_labels_for_len(
    csv_text: &str,
    frames: usize,
) -> Result<Vec<LabeledInterval>, CsiError> {
    let mut lines = data_lines(csv_text);
    let header = lines
        .next()
        .ok_or_else(|| CsiError::MalformedHeader("empty input".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["start_idx", "end_idx", "label"] {
        return Err(CsiError::MalformedHeader(
            "expected 'start_idx,end_idx,label'".into(),
        ));
    }
    let mut out: Vec<(usize, LabeledInterval)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(CsiError::WrongFieldCount {
                row,
                expected: 3,
                found: fields.len(),
            });
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>().map_err(|_| CsiError::BadNumber {
                row,
                text: s.to_string(),
            })
        };
        let start = parse_idx(fields[0])?;
        let end = parse_idx(fields[1])?;
        let label = fields[2]
            .parse::<Label>()
            .map_err(|_| CsiError::UnknownLabel {
                row,
                label: fields[2].to_string(),
            })?;
        if start >= end || end > frames {
            return Err(CsiError::IntervalOutOfRange {
                row,
                start,
                end,
                frames,
            });
        }
        out.push((
            row,
            LabeledInterval {
                start_idx: start,
                end_idx: end,
                label,
            },
        ));
    }
    let mut sorted = out.clone();
    sorted.sort_by_key(|(_, iv)| iv.start_idx);
    for pair in sorted.windows(2) {
        if pair[1].1.start_idx < pair[0].1.end_idx {
            let row = pair[0].0.max(pair[1].0);
            return Err(CsiError::OverlappingIntervals { row });
        }
    }
    Ok(out.into_iter().map(|(_, iv)| iv).collect())
}

pub fn write_labels(intervals: &[LabeledInterval]) -> String {
    let mut s = String::from("start_idx,end_idx,label\n");
    for iv in intervals {
        s.push_str(&format!("{},{},{}\n", iv.start_idx, iv.end_idx, iv.label));
    }
    s
}
