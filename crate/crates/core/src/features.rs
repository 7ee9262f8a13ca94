//! Input representations: the normalized time-index grid, concatenated
//! Fourier features over it, sinusoidal feature stacks, and calendar-derived
//! temporal features.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const TAU: f64 = std::f64::consts::TAU;

/// Frequency multiplier applied inside deeper sine layers' init.
pub const SIREN_OMEGA: f64 = 30.0;

/// A dense row-major matrix of plain values (no graph attached).
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { data, rows, cols }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

// ---------------------------------------------------------------------------
// Time-index grid
// ---------------------------------------------------------------------------

/// The normalized time index covering one lookback+horizon window:
/// position i maps to i/(L+H), so all values lie in [0, 1).
#[derive(Clone, Debug)]
pub struct TimeIndexGrid {
    pub values: Vec<f64>,
    pub lookback: usize,
    pub horizon: usize,
}

impl TimeIndexGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn time_index_grid(lookback: usize, horizon: usize) -> Result<TimeIndexGrid> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::contract(format!(
            "time_index_grid: lookback ({lookback}) and horizon ({horizon}) must be positive"
        )));
    }
    let total = lookback + horizon;
    let values = (0..total).map(|i| i as f64 / total as f64).collect();
    Ok(TimeIndexGrid {
        values,
        lookback,
        horizon,
    })
}

// ---------------------------------------------------------------------------
// Concatenated Fourier features
// ---------------------------------------------------------------------------

/// Fixed random frequency bank: one coefficient vector per scale s, each
/// entry drawn as 2^s · N(0,1). The bank is frozen after construction.
#[derive(Clone, Debug)]
pub struct CffBank {
    /// Per-scale frequency rows, each of length `half_dim`.
    pub scale_rows: Vec<Vec<f64>>,
    half_dim: usize,
}

impl CffBank {
    pub fn new(latent_dim: usize, num_scales: usize, rng: &mut impl Rng) -> Result<Self> {
        if latent_dim % 2 != 0 || latent_dim == 0 {
            return Err(Error::config(format!(
                "cff bank: latent dim must be positive and even, got {latent_dim}"
            )));
        }
        if num_scales == 0 {
            return Err(Error::config("cff bank: need at least one scale"));
        }
        let half_dim = latent_dim / 2;
        let scale_rows = (0..num_scales)
            .map(|s| {
                let sd = (2.0_f64).powi(s as i32);
                (0..half_dim)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(CffBank {
            scale_rows,
            half_dim,
        })
    }

    /// Reconstructs a bank from stored rows (checkpoint reload).
    pub fn from_rows(scale_rows: Vec<Vec<f64>>) -> Result<Self> {
        let half_dim = scale_rows
            .first()
            .map(|r| r.len())
            .ok_or_else(|| Error::config("cff bank: empty scale list"))?;
        if scale_rows.iter().any(|r| r.len() != half_dim) {
            return Err(Error::config("cff bank: ragged scale rows"));
        }
        Ok(CffBank {
            scale_rows,
            half_dim,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.scale_rows.len()
    }

    /// Output width: sin and cos blocks of d/2 for every scale.
    pub fn output_dim(&self) -> usize {
        2 * self.half_dim * self.num_scales()
    }
}

/// Encodes the grid through the bank: row i is the concatenation over scales
/// of [sin(2π·B_s·τ_i), cos(2π·B_s·τ_i)].
pub fn cff_encode(grid: &TimeIndexGrid, bank: &CffBank) -> Matrix {
    let rows = grid.len();
    let cols = bank.output_dim();
    let mut data = vec![0.0; rows * cols];
    for (i, &tau) in grid.values.iter().enumerate() {
        let mut j = i * cols;
        for row in &bank.scale_rows {
            for &b in row {
                data[j] = (TAU * b * tau).sin();
                j += 1;
            }
            for &b in row {
                data[j] = (TAU * b * tau).cos();
                j += 1;
            }
        }
    }
    Matrix::new(data, rows, cols)
}

// ---------------------------------------------------------------------------
// Sinusoidal stacks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sine,
    Gelu,
}

/// A stack of k affine+activation layers bound to a graph.
pub struct SirenStack {
    pub layers: Vec<(Tensor, Tensor)>,
    pub activation: Activation,
}

/// Applies the stack: k sequential affine maps, each followed by the stack's
/// activation. Sine outputs are bounded in [-1, 1] by construction.
pub fn siren_forward(input: &Tensor, stack: &SirenStack) -> Result<Tensor> {
    let mut h = input.clone();
    for (w, b) in &stack.layers {
        h = h.matmul(w)?.add_row(b)?;
        h = match stack.activation {
            Activation::Sine => h.sin(),
            Activation::Gelu => h.gelu(),
        };
    }
    Ok(h)
}

/// Init limit for a sine-activated affine layer: 1/fan_in on the first
/// layer, sqrt(6/fan_in)/ω on deeper ones.
pub fn sine_init_limit(fan_in: usize, first_layer: bool) -> f64 {
    if first_layer {
        1.0 / fan_in as f64
    } else {
        (6.0 / fan_in as f64).sqrt() / SIREN_OMEGA
    }
}

/// Init limit for plain affine / attention maps: 1/sqrt(fan_in).
pub fn affine_init_limit(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Temporal features
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FreqClass {
    Hourly,
    QuarterHourly,
    TenMinutely,
}

impl FreqClass {
    pub fn from_interval_secs(secs: i64) -> Result<Self> {
        match secs {
            3600 => Ok(FreqClass::Hourly),
            900 => Ok(FreqClass::QuarterHourly),
            600 => Ok(FreqClass::TenMinutely),
            other => Err(Error::ingestion(
                None,
                format!("unsupported sampling interval of {other} seconds"),
            )),
        }
    }

    pub fn interval_secs(&self) -> i64 {
        match self {
            FreqClass::Hourly => 3600,
            FreqClass::QuarterHourly => 900,
            FreqClass::TenMinutely => 600,
        }
    }

    /// Calendar features per position: hourly data gets 4, sub-hourly 5.
    pub fn feature_count(&self) -> usize {
        match self {
            FreqClass::Hourly => 4,
            _ => 5,
        }
    }

    fn minute_denominator(&self) -> f64 {
        match self {
            FreqClass::TenMinutely => 50.0,
            _ => 59.0,
        }
    }
}

/// Calendar features for a run of timestamps, every entry normalized to [0,1].
#[derive(Clone, Debug)]
pub struct TemporalFeatures {
    pub matrix: Matrix,
    pub feature_names: Vec<&'static str>,
}

/// Derives per-position calendar features.
///
/// Columns: day-of-year (0-based over 365, clipped for leap days),
/// month-of-year, day-of-week (Monday = 0), hour-of-day, and minute-of-hour
/// for sub-hourly data.
pub fn temporal_features(
    timestamps: &[NaiveDateTime],
    freq: FreqClass,
) -> Result<TemporalFeatures> {
    let step = freq.interval_secs();
    for (i, pair) in timestamps.windows(2).enumerate() {
        let delta = (pair[1] - pair[0]).num_seconds();
        if delta != step {
            return Err(Error::ingestion(
                Some(i + 1),
                format!(
                    "non-uniform spacing: expected {step}s between samples, found {delta}s after {}",
                    pair[0]
                ),
            ));
        }
    }
    let mut feature_names = vec!["day_of_year", "month_of_year", "day_of_week", "hour_of_day"];
    if freq.feature_count() == 5 {
        feature_names.push("minute_of_hour");
    }
    let cols = feature_names.len();
    let mut data = Vec::with_capacity(timestamps.len() * cols);
    for ts in timestamps {
        let doy = (((ts.ordinal() as f64) - 1.0) / 365.0).min(1.0);
        let month = (ts.month() as f64 - 1.0) / 11.0;
        let dow = ts.weekday().num_days_from_monday() as f64 / 6.0;
        let hour = ts.hour() as f64 / 23.0;
        data.push(doy);
        data.push(month);
        data.push(dow);
        data.push(hour);
        if cols == 5 {
            data.push(ts.minute() as f64 / freq.minute_denominator());
        }
    }
    Ok(TemporalFeatures {
        matrix: Matrix::new(data, timestamps.len(), cols),
        feature_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use chrono::NaiveDate;

    #[test]
    fn grid_matches_direct_formula() {
        let grid = time_index_grid(2, 2).unwrap();
        assert_eq!(grid.values, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn grid_endpoints_for_96_96() {
        let grid = time_index_grid(96, 96).unwrap();
        assert_eq!(grid.len(), 192);
        assert_eq!(grid.values[0], 0.0);
        assert!((grid.values[191] - 191.0 / 192.0).abs() < 1e-15);
        assert!(grid.values.iter().all(|&v| v < 1.0));
    }

    #[test]
    fn grid_rejects_zero_lengths() {
        assert!(time_index_grid(0, 4).is_err());
        assert!(time_index_grid(4, 0).is_err());
    }

    #[test]
    fn grid_step_is_constant() {
        let grid = time_index_grid(7, 13).unwrap();
        let step = 1.0 / 20.0;
        for w in grid.values.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-15);
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn cff_at_zero_is_sin0_cos1() {
        let mut rng = substream(2024, "cff");
        let bank = CffBank::new(4, 2, &mut rng).unwrap();
        let grid = time_index_grid(1, 1).unwrap(); // values [0, 0.5]
        let enc = cff_encode(&grid, &bank);
        // Row 0 is tau = 0: sin blocks 0, cos blocks 1, per scale.
        let row = enc.row(0);
        assert_eq!(row, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn cff_outputs_bounded() {
        let mut rng = substream(2024, "cff");
        let bank = CffBank::new(8, 8, &mut rng).unwrap();
        let grid = time_index_grid(16, 16).unwrap();
        let enc = cff_encode(&grid, &bank);
        assert!(enc.data.iter().all(|v| v.abs() <= 1.0 + 1e-15));
    }

    #[test]
    fn cff_single_scale_matches_hand_computation() {
        let bank = CffBank::from_rows(vec![vec![1.0]]).unwrap();
        let grid = time_index_grid(3, 1).unwrap();
        let enc = cff_encode(&grid, &bank);
        for (i, &tau) in grid.values.iter().enumerate() {
            assert!((enc.row(i)[0] - (TAU * tau).sin()).abs() < 1e-15);
            assert!((enc.row(i)[1] - (TAU * tau).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn cff_deterministic_under_fixed_seed() {
        let a = CffBank::new(16, 8, &mut substream(2024, "cff")).unwrap();
        let b = CffBank::new(16, 8, &mut substream(2024, "cff")).unwrap();
        assert_eq!(a.scale_rows, b.scale_rows);
    }

    #[test]
    fn temporal_features_endpoints() {
        let base = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        let stamps: Vec<NaiveDateTime> = (0..24)
            .map(|h| base.and_hms_opt(h, 0, 0).unwrap())
            .collect();
        let feats = temporal_features(&stamps, FreqClass::Hourly).unwrap();
        assert_eq!(feats.matrix.cols, 4);
        assert_eq!(feats.matrix.row(0)[3], 0.0);
        assert_eq!(feats.matrix.row(23)[3], 1.0);
        // 2021-03-01 is a Monday.
        assert_eq!(feats.matrix.row(0)[2], 0.0);
    }

    #[test]
    fn temporal_features_match_calendar_oracle() {
        let ts = NaiveDate::from_ymd_opt(2016, 7, 1)
            .unwrap()
            .and_hms_opt(12, 0, 0)
            .unwrap();
        let feats = temporal_features(&[ts], FreqClass::Hourly).unwrap();
        // Independent calendar arithmetic: 2016-07-01 is day 183 of a leap
        // year (31+29+31+30+31+30+1) and a Friday.
        let days_into_year = 31 + 29 + 31 + 30 + 31 + 30 + 1;
        assert!((feats.matrix.row(0)[0] - (days_into_year as f64 - 1.0) / 365.0).abs() < 1e-12);
        assert!((feats.matrix.row(0)[1] - 6.0 / 11.0).abs() < 1e-12);
        assert!((feats.matrix.row(0)[2] - 4.0 / 6.0).abs() < 1e-12);
        assert!((feats.matrix.row(0)[3] - 12.0 / 23.0).abs() < 1e-12);
    }

    #[test]
    fn temporal_features_all_in_unit_interval() {
        let base = NaiveDate::from_ymd_opt(2020, 12, 28).unwrap();
        let stamps: Vec<NaiveDateTime> = (0..600)
            .map(|i| base.and_hms_opt(0, 0, 0).unwrap() + chrono::Duration::minutes(10 * i))
            .collect();
        let feats = temporal_features(&stamps, FreqClass::TenMinutely).unwrap();
        assert_eq!(feats.matrix.cols, 5);
        assert!(feats
            .matrix
            .data
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn temporal_features_reject_gaps() {
        let base = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let mut stamps: Vec<NaiveDateTime> = (0..4)
            .map(|h| base.and_hms_opt(h, 0, 0).unwrap())
            .collect();
        stamps.push(base.and_hms_opt(6, 0, 0).unwrap()); // 2h gap
        let err = temporal_features(&stamps, FreqClass::Hourly).unwrap_err();
        assert!(err.to_string().contains("row 4"), "{err}");
    }
}
