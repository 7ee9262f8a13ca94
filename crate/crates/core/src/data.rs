//! Dataset ingestion and window generation.
//!
//! CSV layout: UTF-8, comma-separated, header row, first column `date` in
//! `YYYY-MM-DD HH:MM:SS` format, remaining columns numeric. Timestamps must
//! be strictly increasing on a uniform grid; the sampling frequency is
//! inferred from the first interval and validated against every other.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{temporal_features, FreqClass, TemporalFeatures};
use crate::rng::substream;

const DATE_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Per-channel standardization statistics, always computed on the training
/// split only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A timestamped multivariate series with precomputed calendar features.
#[derive(Clone, Debug)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub timestamps: Vec<NaiveDateTime>,
    /// T×C row-major observations.
    pub values: Vec<f64>,
    pub channel_names: Vec<String>,
    pub freq: FreqClass,
    pub temporal: TemporalFeatures,
    pub train_stats: Option<TrainStats>,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn from_parts(
        name: impl Into<String>,
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        if timestamps.len() < 2 {
            return Err(Error::ingestion(None, "need at least two rows"));
        }
        if values.len() != timestamps.len() * channel_names.len() {
            return Err(Error::ingestion(
                None,
                format!(
                    "value count {} does not match {} rows x {} channels",
                    values.len(),
                    timestamps.len(),
                    channel_names.len()
                ),
            ));
        }
        let step = (timestamps[1] - timestamps[0]).num_seconds();
        let freq = FreqClass::from_interval_secs(step)?;
        for (i, pair) in timestamps.windows(2).enumerate() {
            let delta = (pair[1] - pair[0]).num_seconds();
            if delta != step {
                // i+1 is the offending 0-based sample; +2 more converts to a
                // 1-based CSV row below the header.
                return Err(Error::ingestion(
                    Some(i + 3),
                    format!("timestamp gap: expected {step}s, found {delta}s after {}", pair[0]),
                ));
            }
        }
        let temporal = temporal_features(&timestamps, freq)?;
        Ok(TimeSeriesDataset {
            name: name.into(),
            timestamps,
            values,
            channel_names,
            freq,
            temporal,
            train_stats: None,
        })
    }
}

/// Parses an ETT-layout CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::ingestion(None, format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::ingestion(None, e.to_string()))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("date") {
        return Err(Error::ingestion(
            Some(1),
            "first column must be named 'date'",
        ));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if channel_names.is_empty() {
        return Err(Error::ingestion(Some(1), "no value columns"));
    }
    let c = channel_names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::ingestion(Some(row_no), e.to_string()))?;
        if record.len() != c + 1 {
            return Err(Error::ingestion(
                Some(row_no),
                format!("expected {} fields, found {}", c + 1, record.len()),
            ));
        }
        let ts = NaiveDateTime::parse_from_str(&record[0], DATE_FORMAT).map_err(|e| {
            Error::ingestion(Some(row_no), format!("bad date '{}': {e}", &record[0]))
        })?;
        timestamps.push(ts);
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|e| {
                Error::ingestion(Some(row_no), format!("bad number '{field}': {e}"))
            })?;
            values.push(v);
        }
    }
    TimeSeriesDataset::from_parts(name, timestamps, values, channel_names)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Chronological split ratios (train/val/test), summing to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let sum = train + val + test;
        if train < 0.0 || val < 0.0 || test < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios {train}:{val}:{test} must be nonnegative and sum to 1"
            )));
        }
        Ok(SplitSpec {
            ratios: [train, val, test],
        })
    }

    /// Parses "6:2:2"-style or "0.6:0.2:0.2"-style ratio strings.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("bad split '{s}': {e}")))?;
        if parts.len() != 3 {
            return Err(Error::config(format!("split '{s}' needs three fields")));
        }
        let total: f64 = parts.iter().sum();
        if total <= 0.0 {
            return Err(Error::config(format!("split '{s}' must be positive")));
        }
        SplitSpec::new(parts[0] / total, parts[1] / total, parts[2] / total)
    }
}

/// Contiguous, ordered, disjoint index ranges covering 0..t_len: floor for
/// train and validation, remainder to test.
pub fn chronological_split(
    t_len: usize,
    spec: &SplitSpec,
) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let train_end = (t_len as f64 * spec.ratios[0]).floor() as usize;
    let val_end = train_end + (t_len as f64 * spec.ratios[1]).floor() as usize;
    (0..train_end, train_end..val_end, val_end..t_len)
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Z-scores every channel using statistics from the training range only.
/// Channels with zero variance get their std clamped to 1 (and a warning).
pub fn standardize(ds: &TimeSeriesDataset, train_range: std::ops::Range<usize>) -> Result<TimeSeriesDataset> {
    if train_range.is_empty() {
        return Err(Error::config("standardize: empty train range"));
    }
    let c = ds.channels();
    let n = train_range.len() as f64;
    let mut mean = vec![0.0; c];
    for i in train_range.clone() {
        for j in 0..c {
            mean[j] += ds.values[i * c + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut std = vec![0.0; c];
    for i in train_range.clone() {
        for j in 0..c {
            let d = ds.values[i * c + j] - mean[j];
            std[j] += d * d;
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            log::warn!(
                "channel {} has zero variance on the train split; clamping std to 1",
                ds.channel_names[j]
            );
            *s = 1.0;
        }
    }
    let mut out = ds.clone();
    for i in 0..ds.len() {
        for j in 0..c {
            out.values[i * c + j] = (ds.values[i * c + j] - mean[j]) / std[j];
        }
    }
    out.train_stats = Some(TrainStats { mean, std });
    Ok(out)
}

/// Inverse of [`standardize`] for a block of standardized values.
pub fn destandardize(values: &mut [f64], channels: usize, stats: &TrainStats) {
    for (i, v) in values.iter_mut().enumerate() {
        let j = i % channels;
        *v = *v * stats.std[j] + stats.mean[j];
    }
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// One (lookback, horizon) training or evaluation sample.
#[derive(Clone, Debug)]
pub struct ForecastWindow {
    /// L×C lookback observations.
    pub x: Vec<f64>,
    /// H×C horizon observations.
    pub y: Vec<f64>,
    /// Last lookback row (the initial condition), length C.
    pub x_init: Vec<f64>,
    /// (L+H)×t calendar features aligned with the window.
    pub t_feats: Vec<f64>,
    /// Start offset in the source series.
    pub offset: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
}

/// All valid window start offsets inside `range` for stride-1 enumeration.
pub fn window_offsets(
    range: std::ops::Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    let need = lookback + horizon;
    if range.len() < need {
        return Err(Error::config(format!(
            "range of length {} cannot fit a window of {need} (lookback {lookback} + horizon {horizon})",
            range.len()
        )));
    }
    if stride == 0 {
        return Err(Error::config("window stride must be >= 1"));
    }
    Ok((range.start..=range.end - need).step_by(stride).collect())
}

/// Materializes the window starting at `offset`.
pub fn window_at(ds: &TimeSeriesDataset, offset: usize, lookback: usize, horizon: usize) -> ForecastWindow {
    let c = ds.channels();
    let x = ds.values[offset * c..(offset + lookback) * c].to_vec();
    let y = ds.values[(offset + lookback) * c..(offset + lookback + horizon) * c].to_vec();
    let x_init = x[(lookback - 1) * c..lookback * c].to_vec();
    let t_cols = ds.temporal.matrix.cols;
    let t_feats =
        ds.temporal.matrix.data[offset * t_cols..(offset + lookback + horizon) * t_cols].to_vec();
    ForecastWindow {
        x,
        y,
        x_init,
        t_feats,
        offset,
        lookback,
        horizon,
        channels: c,
    }
}

/// Stride-1 window sequence over `range` (via [`window_offsets`]).
pub fn make_windows(
    ds: &TimeSeriesDataset,
    range: std::ops::Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ForecastWindow>> {
    Ok(window_offsets(range, lookback, horizon, stride)?
        .into_iter()
        .map(|o| window_at(ds, o, lookback, horizon))
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Hourly sinusoid mixture used by the toy experiments: each channel is
/// sin(2πt/24 + φ_c) + 0.1·sin(2πt/168 + φ_c) + N(0, 0.01²) with channel
/// phases φ_c = 2πc/C.
pub fn synthetic_sinusoid(t_len: usize, channels: usize, seed: u64) -> Result<TimeSeriesDataset> {
    let mut rng = substream(seed, "synthetic");
    let base = chrono::NaiveDate::from_ymd_opt(2020, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let timestamps: Vec<NaiveDateTime> = (0..t_len)
        .map(|i| base + chrono::Duration::hours(i as i64))
        .collect();
    let mut values = Vec::with_capacity(t_len * channels);
    for t in 0..t_len {
        for c in 0..channels {
            let phase = std::f64::consts::TAU * c as f64 / channels as f64;
            let daily = (std::f64::consts::TAU * t as f64 / 24.0 + phase).sin();
            let weekly = 0.1 * (std::f64::consts::TAU * t as f64 / 168.0 + phase).sin();
            let noise: f64 = 0.01 * rng.sample::<f64, _>(StandardNormal);
            values.push(daily + weekly + noise);
        }
    }
    let channel_names = (0..channels).map(|c| format!("ch{c}")).collect();
    TimeSeriesDataset::from_parts("sinusoid", timestamps, values, channel_names)
}
