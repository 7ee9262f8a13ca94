//! Skill comparators: the persistence forecast and a per-channel linear
//! ridge from the flattened lookback to the horizon. Both serve as
//! independent oracles for the acceptance checks.

use std::ops::Range;

use crate::data::{window_at, window_offsets, TimeSeriesDataset};
use crate::error::Result;
use crate::linalg::spd_solve;

fn metrics_from(errors_sq: f64, errors_abs: f64, count: usize) -> (f64, f64) {
    (errors_sq / count as f64, errors_abs / count as f64)
}

/// Persistence baseline: every horizon step repeats the last lookback value.
/// Returns (MSE, MAE) over all windows of `range` in the dataset's units.
pub fn persistence(
    ds: &TimeSeriesDataset,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
) -> Result<(f64, f64)> {
    let offsets = window_offsets(range, lookback, horizon, 1)?;
    let c = ds.channels();
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for o in offsets {
        let w = window_at(ds, o, lookback, horizon);
        for (i, y) in w.y.iter().enumerate() {
            let e = w.x_init[i % c] - y;
            se += e * e;
            ae += e.abs();
        }
        count += w.y.len();
    }
    Ok(metrics_from(se, ae, count))
}

/// Per-channel ridge regression from the L lookback values (plus bias) to
/// the H horizon values, fitted on the training range by accumulated normal
/// equations and evaluated on `eval_range`. Returns (MSE, MAE).
pub fn linear_ridge(
    ds: &TimeSeriesDataset,
    train_range: Range<usize>,
    eval_range: Range<usize>,
    lookback: usize,
    horizon: usize,
    lambda: f64,
) -> Result<(f64, f64)> {
    let train_offsets = window_offsets(train_range, lookback, horizon, 1)?;
    let eval_offsets = window_offsets(eval_range, lookback, horizon, 1)?;
    let c = ds.channels();
    let d1 = lookback + 1;

    // Normal equations per channel: A = Σ φφᵀ + λI, B = Σ φ yᵀ with
    // φ = [lookback values; 1].
    let mut a = vec![vec![0.0; d1 * d1]; c];
    let mut b = vec![vec![0.0; d1 * horizon]; c];
    let mut phi = vec![0.0; d1];
    for &o in &train_offsets {
        let w = window_at(ds, o, lookback, horizon);
        for ch in 0..c {
            for i in 0..lookback {
                phi[i] = w.x[i * c + ch];
            }
            phi[lookback] = 1.0;
            let (a_ch, b_ch) = (&mut a[ch], &mut b[ch]);
            for i in 0..d1 {
                let pi = phi[i];
                if pi != 0.0 {
                    for j in 0..d1 {
                        a_ch[i * d1 + j] += pi * phi[j];
                    }
                    for t in 0..horizon {
                        b_ch[i * horizon + t] += pi * w.y[t * c + ch];
                    }
                }
            }
        }
    }
    let mut weights = Vec::with_capacity(c);
    for ch in 0..c {
        for i in 0..d1 {
            a[ch][i * d1 + i] += lambda;
        }
        weights.push(spd_solve(&a[ch], d1, &b[ch], horizon)?);
    }

    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for &o in &eval_offsets {
        let w = window_at(ds, o, lookback, horizon);
        for ch in 0..c {
            for i in 0..lookback {
                phi[i] = w.x[i * c + ch];
            }
            phi[lookback] = 1.0;
            let w_ch = &weights[ch];
            for t in 0..horizon {
                let mut pred = 0.0;
                for i in 0..d1 {
                    pred += phi[i] * w_ch[i * horizon + t];
                }
                let e = pred - w.y[t * c + ch];
                se += e * e;
                ae += e.abs();
            }
        }
        count += horizon * c;
    }
    Ok(metrics_from(se, ae, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chronological_split, standardize, synthetic_sinusoid, SplitSpec};
    use crate::data::TimeSeriesDataset as Ds;

    fn constant_series() -> Ds {
        let base = chrono::NaiveDate::from_ymd_opt(2021, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let timestamps: Vec<_> = (0..40).map(|i| base + chrono::Duration::hours(i)).collect();
        Ds::from_parts("const", timestamps, vec![2.0; 40], vec!["a".into()]).unwrap()
    }

    #[test]
    fn persistence_is_exact_on_constant_series() {
        let ds = constant_series();
        let (mse, mae) = persistence(&ds, 0..40, 8, 4).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(mae, 0.0);
    }

    #[test]
    fn persistence_matches_direct_formula() {
        let ds = synthetic_sinusoid(200, 2, 3).unwrap();
        let (mse, _) = persistence(&ds, 0..200, 8, 4).unwrap();
        // Independent recomputation straight from the definition.
        let c = 2;
        let mut se = 0.0;
        let mut n = 0;
        for o in 0..=(200 - 12) {
            for t in 0..4 {
                for ch in 0..c {
                    let init = ds.values[(o + 7) * c + ch];
                    let y = ds.values[(o + 8 + t) * c + ch];
                    se += (init - y) * (init - y);
                    n += 1;
                }
            }
        }
        assert!((mse - se / n as f64).abs() <= 1e-12);
    }

    #[test]
    fn linear_ridge_beats_persistence_on_the_sinusoid() {
        let ds = synthetic_sinusoid(1200, 3, 11).unwrap();
        let spec = SplitSpec::parse("7:1:2").unwrap();
        let (tr, _, te) = chronological_split(ds.len(), &spec);
        let ds = standardize(&ds, tr.clone()).unwrap();
        let (p_mse, _) = persistence(&ds, te.clone(), 48, 24).unwrap();
        let (r_mse, _) = linear_ridge(&ds, tr, te, 48, 24, 1.0).unwrap();
        assert!(
            r_mse <= p_mse,
            "linear ridge {r_mse} should not lose to persistence {p_mse}"
        );
    }
}
