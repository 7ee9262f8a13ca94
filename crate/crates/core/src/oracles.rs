//! Independent reference implementations used to cross-check the main
//! computation paths, plus a central-finite-difference gradient checker.
//!
//! Everything here deliberately avoids the graph engine: the matrix product
//! is a plain triple loop, the patched-integration reference is an explicit
//! per-position sum, and the ridge reference inverts the normal equations
//! with `nalgebra`. These routines back both the test suites and the
//! `selftest` CLI command.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Triple-loop matrix product reference: (m×k)·(k×n).
pub fn matmul_reference(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Sequential prefix-sum reference over a flat vector.
pub fn cumsum_reference(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for &v in x {
        acc += v;
        out.push(acc);
    }
    out
}

/// Patched backward-integration reference.
///
/// Inputs `u` and `dudt` are rows×dim row-major with rows divisible by the
/// patch length `s`. Within each patch, position j takes the patch-final
/// direct estimate minus the sum of derivative rows strictly after j:
/// z[j] = u[e] − Σ_{k=j+1..=e} dudt[k], where e is the patch's last row.
pub fn solve_loop_reference(u: &[f64], dudt: &[f64], rows: usize, dim: usize, s: usize) -> Vec<f64> {
    assert_eq!(rows % s, 0, "rows must be divisible by patch length");
    let mut z = vec![0.0; rows * dim];
    let patches = rows / s;
    for p in 0..patches {
        let end = (p + 1) * s - 1;
        for j in p * s..=end {
            for c in 0..dim {
                let mut v = u[end * dim + c];
                for k in (j + 1)..=end {
                    v -= dudt[k * dim + c];
                }
                z[j * dim + c] = v;
            }
        }
    }
    z
}

/// Ridge regression reference via explicit normal-equation inversion.
///
/// Features `z` are rows×dim; a ones column is appended internally. Returns
/// the (dim+1)×targets weight matrix (last row is the bias).
pub fn ridge_reference(
    z: &[f64],
    rows: usize,
    dim: usize,
    targets: &[f64],
    n_targets: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    let d1 = dim + 1;
    let zp = DMatrix::from_fn(rows, d1, |i, j| if j < dim { z[i * dim + j] } else { 1.0 });
    let y = DMatrix::from_fn(rows, n_targets, |i, j| targets[i * n_targets + j]);
    let a = zp.transpose() * &zp + DMatrix::identity(d1, d1) * lambda;
    let inv = a
        .try_inverse()
        .ok_or_else(|| Error::numeric("ridge_reference: singular normal equations"))?;
    let w = inv * zp.transpose() * y;
    let mut out = vec![0.0; d1 * n_targets];
    for i in 0..d1 {
        for j in 0..n_targets {
            out[i * n_targets + j] = w[(i, j)];
        }
    }
    Ok(out)
}

/// Max-norm of the ridge objective gradient 2(Z₊ᵀ(Z₊W−Y) + λW) at W.
pub fn ridge_objective_grad_norm(
    z: &[f64],
    rows: usize,
    dim: usize,
    targets: &[f64],
    n_targets: usize,
    lambda: f64,
    w: &[f64],
) -> f64 {
    let d1 = dim + 1;
    let zp = DMatrix::from_fn(rows, d1, |i, j| if j < dim { z[i * dim + j] } else { 1.0 });
    let y = DMatrix::from_fn(rows, n_targets, |i, j| targets[i * n_targets + j]);
    let wm = DMatrix::from_fn(d1, n_targets, |i, j| w[i * n_targets + j]);
    let grad = (zp.transpose() * (&zp * &wm - y) + &wm * lambda) * 2.0;
    grad.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
}

/// Result of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_diff: f64,
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Central finite differences of `f` at `x` with step `h`.
///
/// `f` must be a pure function of the full vector; it is called 2·len times.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Compares gradients elementwise.
///
/// An element passes when |a−n| ≤ atol + rtol·max(clamp, |a|, |n|) with the
/// denominator clamped at 1e-8; the small absolute floor absorbs the noise
/// floor of central differences on O(1) objectives.
pub fn compare_grads(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> GradCheck {
    const CLAMP: f64 = 1e-8;
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck {
        checked: analytic.len(),
        failures: 0,
        max_rel_err: 0.0,
        max_abs_diff: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let denom = CLAMP.max(a.abs()).max(n.abs());
        let rel = diff / denom;
        if diff > atol + rtol * denom {
            out.failures += 1;
        }
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst_index = i;
        }
        out.max_abs_diff = out.max_abs_diff.max(diff);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![1.0, -2.0, 0.5];
        let g = central_difference(&mut f, &x, 1e-5);
        let expect = vec![2.0, -4.0, 1.0];
        let check = compare_grads(&expect, &g, 1e-6, 1e-9);
        assert!(check.passed(), "{check:?}");
    }

    #[test]
    fn ridge_reference_zero_targets_gives_zero_weights() {
        let z = vec![0.3, -0.2, 0.5, 0.9, -1.0, 0.1];
        let w = ridge_reference(&z, 3, 2, &[0.0; 3], 1, 1.0).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-14));
    }
}
