//! Closed-form ridge decoder.
//!
//! Each window gets its own decoder: a ridge regression from the lookback
//! rows of the latent sequence to the lookback deltas (observation minus the
//! initial condition), solved in closed form through a symmetric
//! positive-definite factorization. The solve is a graph op, so the horizon
//! loss differentiates through the fit into everything upstream.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-window decoder weights. `weights` is (d+1)×C with the bias in the
/// last row (a ones column is appended to the latent features internally).
pub struct RidgeSolution {
    pub weights: Tensor,
    pub lambda: f64,
}

fn with_ones_column(z: &Tensor) -> Result<Tensor> {
    let rows = z.shape()[0];
    let ones = z.graph().constant(vec![1.0; rows], &[rows, 1])?;
    Tensor::cat(&[z, &ones], 1)
}

/// Fits W = (Z₊ᵀZ₊ + λI)⁻¹ Z₊ᵀ·targets where Z₊ is `z_lookback` with an
/// appended ones column. Differentiable with respect to `z_lookback` and
/// `targets`.
pub fn ridge_fit(z_lookback: &Tensor, targets: &Tensor, lambda: f64) -> Result<RidgeSolution> {
    if !(lambda > 0.0) {
        return Err(Error::contract(format!(
            "ridge_fit: lambda must be positive, got {lambda}"
        )));
    }
    if z_lookback.rank() != 2
        || targets.rank() != 2
        || z_lookback.shape()[0] != targets.shape()[0]
        || z_lookback.shape()[0] == 0
    {
        return Err(Error::ShapeMismatch {
            op: "ridge_fit",
            lhs: z_lookback.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let d1 = z_lookback.shape()[1] + 1;
    let zp = with_ones_column(z_lookback)?;
    let zt = zp.transpose()?;
    let gram = zt.matmul(&zp)?;
    let mut eye = vec![0.0; d1 * d1];
    for i in 0..d1 {
        eye[i * d1 + i] = lambda;
    }
    let reg = z_lookback.graph().constant(eye, &[d1, d1])?;
    let a = gram.add(&reg)?;
    let b = zt.matmul(targets)?;
    let weights = a.solve_spd(&b)?;
    Ok(RidgeSolution { weights, lambda })
}

/// Latent-to-delta map: each row of `z` (with appended 1) times the fitted
/// weights.
pub fn decode_deltas(z: &Tensor, solution: &RidgeSolution) -> Result<Tensor> {
    with_ones_column(z)?.matmul(&solution.weights)
}

/// Full predictions: decoded deltas shifted by the initial condition.
pub fn decode(z: &Tensor, solution: &RidgeSolution, x_init: &Tensor) -> Result<Tensor> {
    decode_deltas(z, solution)?.add_row(x_init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::oracles::{ridge_objective_grad_norm, ridge_reference};
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn zero_targets_give_zero_weights() {
        let g = Graph::new();
        let mut rng = substream(20, "test");
        let z = g
            .constant((0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[4, 3])
            .unwrap();
        let t = g.constant(vec![0.0; 8], &[4, 2]).unwrap();
        let sol = ridge_fit(&z, &t, 1.0).unwrap();
        assert!(sol.weights.value().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn huge_lambda_shrinks_weights() {
        let g = Graph::new();
        let mut rng = substream(21, "test");
        let rows = 10;
        let dim = 3;
        let z_data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t_data: Vec<f64> = (0..rows * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = g.constant(z_data.clone(), &[rows, dim]).unwrap();
        let t = g.constant(t_data.clone(), &[rows, 2]).unwrap();
        let lambda = 1e8;
        let sol = ridge_fit(&z, &t, lambda).unwrap();
        // ‖W‖ is bounded by ‖Z₊ᵀY‖/λ.
        let zt_y: f64 = {
            let mut acc: f64 = 0.0;
            for j in 0..=dim {
                for c in 0..2 {
                    let mut s = 0.0;
                    for i in 0..rows {
                        let feat = if j < dim { z_data[i * dim + j] } else { 1.0 };
                        s += feat * t_data[i * 2 + c];
                    }
                    acc += s * s;
                }
            }
            acc.sqrt()
        };
        let w_norm: f64 = sol
            .weights
            .value()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(w_norm <= zt_y / lambda * (1.0 + 1e-9));
    }

    #[test]
    fn matches_normal_equation_oracle() {
        let g = Graph::new();
        let mut rng = substream(22, "test");
        let (rows, dim, targets) = (20, 3, 2);
        let z_data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t_data: Vec<f64> = (0..rows * targets).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = g.constant(z_data.clone(), &[rows, dim]).unwrap();
        let t = g.constant(t_data.clone(), &[rows, targets]).unwrap();
        let sol = ridge_fit(&z, &t, 1.0).unwrap();
        let w_ref = ridge_reference(&z_data, rows, dim, &t_data, targets, 1.0).unwrap();
        for (a, b) in sol.weights.value().iter().zip(&w_ref) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
        let grad_norm = ridge_objective_grad_norm(
            &z_data,
            rows,
            dim,
            &t_data,
            targets,
            1.0,
            &sol.weights.value(),
        );
        assert!(grad_norm <= 1e-8, "objective gradient norm {grad_norm}");
    }

    #[test]
    fn zero_weights_decode_to_the_initial_condition() {
        let g = Graph::new();
        let mut rng = substream(23, "test");
        let z = g
            .constant((0..15).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[5, 3])
            .unwrap();
        let sol = RidgeSolution {
            weights: g.constant(vec![0.0; 4 * 2], &[4, 2]).unwrap(),
            lambda: 1.0,
        };
        let x_init = g.constant(vec![3.5, -1.25], &[2]).unwrap();
        let preds = decode(&z, &sol, &x_init).unwrap();
        for row in preds.value().chunks(2) {
            assert_eq!(row, &[3.5, -1.25]);
        }
    }

    #[test]
    fn near_interpolation_on_full_rank_square_system() {
        // rows == dim + 1 makes Z₊ square; with vanishing regularization the
        // lookback reconstruction is near-exact.
        let g = Graph::new();
        let mut rng = substream(24, "test");
        let (rows, dim, tcols) = (5, 4, 2);
        let z_data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t_data: Vec<f64> = (0..rows * tcols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = g.constant(z_data, &[rows, dim]).unwrap();
        let t = g.constant(t_data.clone(), &[rows, tcols]).unwrap();
        let sol = ridge_fit(&z, &t, 1e-10).unwrap();
        let recon = decode_deltas(&z, &sol).unwrap();
        for (a, b) in recon.value().iter().zip(&t_data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn decode_shapes() {
        let g = Graph::new();
        let z = g.constant(vec![0.0; 192 * 64], &[192, 64]).unwrap();
        let sol = RidgeSolution {
            weights: g.constant(vec![0.0; 65 * 7], &[65, 7]).unwrap(),
            lambda: 1.0,
        };
        let x_init = g.constant(vec![0.0; 7], &[7]).unwrap();
        let preds = decode(&z, &sol, &x_init).unwrap();
        assert_eq!(preds.shape(), &[192, 7]);
    }

    #[test]
    fn lookback_fit_error_is_monotone_in_lambda() {
        let g = Graph::new();
        let mut rng = substream(25, "test");
        let (rows, dim, tcols) = (16, 3, 2);
        let z_data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t_data: Vec<f64> = (0..rows * tcols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut prev = -1.0;
        for lambda in [1e-4, 1e-2, 1.0, 1e2, 1e4] {
            let z = g.constant(z_data.clone(), &[rows, dim]).unwrap();
            let t = g.constant(t_data.clone(), &[rows, tcols]).unwrap();
            let sol = ridge_fit(&z, &t, lambda).unwrap();
            let recon = decode_deltas(&z, &sol).unwrap();
            let err: f64 = recon
                .value()
                .iter()
                .zip(&t_data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(err >= prev - 1e-10, "fit error decreased: {prev} -> {err}");
            prev = err;
        }
    }

    #[test]
    fn non_finite_inputs_error() {
        let g = Graph::new();
        let z = g.constant(vec![f64::NAN; 6], &[3, 2]).unwrap();
        let t = g.constant(vec![0.0; 3], &[3, 1]).unwrap();
        assert!(ridge_fit(&z, &t, 1.0).is_err());
    }
}
