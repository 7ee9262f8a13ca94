//! Patched Euler integration in latent space.
//!
//! The sequence is split into non-overlapping patches of length S. Within a
//! patch the final position takes the direct head estimate u; every earlier
//! position j is reconstructed backwards from that anchor by subtracting the
//! derivative head's rows after j (Δτ = 1):
//!
//!   z[j] = u[e] − Σ_{k=j+1..=e} dudt[k],   e = patch end.
//!
//! The whole reconstruction is expressed with reshape / flip / narrow /
//! concat / cumsum so gradients flow through it, and a small MLP maps the
//! integrated sequence to the final latent.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A two-layer perceptron (affine, GeLU, affine).
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub fn mlp_forward(x: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    x.matmul(&mlp.w1)?
        .add_row(&mlp.b1)?
        .gelu()
        .matmul(&mlp.w2)?
        .add_row(&mlp.b2)
}

/// Solver heads bound to one graph.
pub struct SolverBound {
    pub dudt_head: Mlp,
    pub u_head: Mlp,
    pub out_head: Mlp,
    pub patch_len: usize,
}

/// Index of the last position of the patch containing `i`.
pub fn patch_anchor(i: usize, patch_len: usize, total: usize) -> Result<usize> {
    if patch_len == 0 || total % patch_len != 0 {
        return Err(Error::config(format!(
            "patch length {patch_len} must divide sequence length {total}"
        )));
    }
    if i >= total {
        return Err(Error::contract(format!(
            "patch_anchor: index {i} out of range for length {total}"
        )));
    }
    Ok((i / patch_len + 1) * patch_len - 1)
}

/// Everything the solver produces for one (possibly row-stacked) sequence.
pub struct SolverParts {
    /// Direct integral estimates, (rows)×d.
    pub u: Tensor,
    /// Derivative estimates, (rows)×d.
    pub dudt: Tensor,
    /// Integrated sequence before the output MLP.
    pub z_pre: Tensor,
    /// Final latent sequence.
    pub z: Tensor,
}

/// Runs the solver heads and the patched backward reconstruction.
///
/// `alpha` is (B·(L+H))×d row-stacked; (L+H) must be divisible by the patch
/// length so patches never straddle window boundaries.
pub fn solve_parts(alpha: &Tensor, solver: &SolverBound) -> Result<SolverParts> {
    let rows = alpha.shape()[0];
    let d = alpha.shape()[1];
    let s = solver.patch_len;
    if s == 0 || rows % s != 0 {
        return Err(Error::config(format!(
            "patch length {s} must divide sequence length {rows}"
        )));
    }
    let u = mlp_forward(alpha, &solver.u_head)?;
    let dudt = mlp_forward(alpha, &solver.dudt_head)?;

    let patches = rows / s;
    let u3 = u.reshape(&[patches, s, d])?;
    let neg3 = dudt.neg().reshape(&[patches, s, d])?;
    let flipped = neg3.flip(1)?;
    let trimmed = flipped.narrow(1, 0, s - 1)?;
    let anchor = u3.narrow(1, s - 1, 1)?;
    let seq = Tensor::cat(&[&anchor, &trimmed], 1)?;
    let summed = seq.cumsum(1)?;
    let z_pre = summed.flip(1)?.reshape(&[rows, d])?;
    let z = mlp_forward(&z_pre, &solver.out_head)?;
    Ok(SolverParts { u, dudt, z_pre, z })
}

/// The latent integral sequence for `alpha`.
pub fn solve(alpha: &Tensor, solver: &SolverBound) -> Result<Tensor> {
    Ok(solve_parts(alpha, solver)?.z)
}

/// Continuity penalty across patch boundaries.
///
/// At each patch start position b (other than the first), the direct
/// estimate u[b] should agree with the previous patch's anchor extended one
/// Euler step forward, u[b−1] + dudt[b]. Smooth-L1 averaged over boundaries;
/// a single patch has no boundaries and scores exactly 0.
pub fn continuity_residual(
    u: &Tensor,
    dudt: &Tensor,
    patch_len: usize,
    beta: f64,
) -> Result<Tensor> {
    if u.shape() != dudt.shape() {
        return Err(Error::ShapeMismatch {
            op: "continuity_residual",
            lhs: u.shape().to_vec(),
            rhs: dudt.shape().to_vec(),
        });
    }
    let rows = u.shape()[0];
    let d = u.shape()[1];
    if patch_len == 0 || rows % patch_len != 0 {
        return Err(Error::config(format!(
            "patch length {patch_len} must divide sequence length {rows}"
        )));
    }
    let patches = rows / patch_len;
    if patches < 2 {
        return Ok(u.graph().scalar(0.0));
    }
    let u3 = u.reshape(&[patches, patch_len, d])?;
    let d3 = dudt.reshape(&[patches, patch_len, d])?;
    let starts = u3.narrow(1, 0, 1)?.reshape(&[patches, d])?;
    let ends = u3
        .narrow(1, patch_len - 1, 1)?
        .reshape(&[patches, d])?;
    let d_starts = d3.narrow(1, 0, 1)?.reshape(&[patches, d])?;

    let direct = starts.narrow(0, 1, patches - 1)?;
    let extended = ends
        .narrow(0, 0, patches - 1)?
        .add(&d_starts.narrow(0, 1, patches - 1)?)?;
    Ok(direct.smooth_l1_core(&extended, beta)?.mean_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::oracles::solve_loop_reference;
    use crate::rng::substream;
    use rand::Rng;

    fn identity_heads(g: &Graph, d: usize, s: usize) -> SolverBound {
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        SolverBound {
            dudt_head: Mlp {
                w1: g.constant(eye.clone(), &[d, d]).unwrap(),
                b1: g.zeros(&[d], false),
                w2: g.constant(eye.clone(), &[d, d]).unwrap(),
                b2: g.zeros(&[d], false),
            },
            u_head: Mlp {
                w1: g.constant(eye.clone(), &[d, d]).unwrap(),
                b1: g.zeros(&[d], false),
                w2: g.constant(eye, &[d, d]).unwrap(),
                b2: g.zeros(&[d], false),
            },
            out_head: Mlp {
                w1: g.zeros(&[d, d], false),
                b1: g.zeros(&[d], false),
                w2: g.zeros(&[d, d], false),
                b2: g.zeros(&[d], false),
            },
            patch_len: s,
        }
    }

    /// Reconstruction applied to explicit u/dudt leaves (bypassing the
    /// heads), mirroring the body of `solve_parts`.
    fn reconstruct(g: &Graph, u: &[f64], dudt: &[f64], rows: usize, d: usize, s: usize) -> Vec<f64> {
        let ut = g.constant(u.to_vec(), &[rows, d]).unwrap();
        let dt = g.constant(dudt.to_vec(), &[rows, d]).unwrap();
        let patches = rows / s;
        let u3 = ut.reshape(&[patches, s, d]).unwrap();
        let neg3 = dt.neg().reshape(&[patches, s, d]).unwrap();
        let flipped = neg3.flip(1).unwrap();
        let trimmed = flipped.narrow(1, 0, s - 1).unwrap();
        let anchor = u3.narrow(1, s - 1, 1).unwrap();
        let seq = Tensor::cat(&[&anchor, &trimmed], 1).unwrap();
        let summed = seq.cumsum(1).unwrap();
        summed
            .flip(1)
            .unwrap()
            .reshape(&[rows, d])
            .unwrap()
            .value()
    }

    #[test]
    fn patch_anchor_formula() {
        assert_eq!(patch_anchor(0, 4, 8).unwrap(), 3);
        assert_eq!(patch_anchor(5, 4, 8).unwrap(), 7);
        for i in 0..4 {
            assert_eq!(patch_anchor(i, 4, 8).unwrap(), 3);
        }
        assert!(patch_anchor(0, 3, 8).is_err());
    }

    #[test]
    fn zero_derivative_repeats_the_anchor() {
        let g = Graph::new();
        let mut rng = substream(11, "test");
        let (rows, d, s) = (8, 2, 4);
        let u: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = reconstruct(&g, &u, &vec![0.0; rows * d], rows, d, s);
        for p in 0..rows / s {
            let end = (p + 1) * s - 1;
            for j in p * s..=end {
                for c in 0..d {
                    assert_eq!(z[j * d + c], u[end * d + c]);
                }
            }
        }
    }

    #[test]
    fn unit_patch_is_the_direct_estimate() {
        let g = Graph::new();
        let mut rng = substream(12, "test");
        let (rows, d) = (6, 3);
        let u: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dudt: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = reconstruct(&g, &u, &dudt, rows, d, 1);
        assert_eq!(z, u);
    }

    #[test]
    fn reconstruction_matches_loop_oracle_exactly() {
        let mut rng = substream(13, "test");
        let (rows, d, s) = (8, 2, 4);
        let g = Graph::new();
        let u: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dudt: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = reconstruct(&g, &u, &dudt, rows, d, s);
        let z_ref = solve_loop_reference(&u, &dudt, rows, d, s);
        for (a, b) in z.iter().zip(&z_ref) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_patch_runs_and_continuity_is_zero() {
        let g = Graph::new();
        let mut rng = substream(14, "test");
        let (rows, d) = (12, 4);
        let alpha = g
            .constant(
                (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[rows, d],
            )
            .unwrap();
        let solver = identity_heads(&g, d, rows); // S = L+H: one patch
        let parts = solve_parts(&alpha, &solver).unwrap();
        assert_eq!(parts.z.shape(), &[rows, d]);
        let lc = continuity_residual(&parts.u, &parts.dudt, rows, 1.0).unwrap();
        assert_eq!(lc.item(), 0.0);
    }

    #[test]
    fn consistent_differences_have_zero_continuity_residual() {
        let g = Graph::new();
        let (rows, d, s) = (12, 2, 4);
        // Smooth u; dudt as exact successive differences across rows.
        let mut u = vec![0.0; rows * d];
        for j in 0..rows {
            for c in 0..d {
                u[j * d + c] = ((j as f64) * 0.37 + c as f64).sin();
            }
        }
        let mut dudt = vec![0.0; rows * d];
        for j in 1..rows {
            for c in 0..d {
                dudt[j * d + c] = u[j * d + c] - u[(j - 1) * d + c];
            }
        }
        let ut = g.constant(u, &[rows, d]).unwrap();
        let dt = g.constant(dudt, &[rows, d]).unwrap();
        let lc = continuity_residual(&ut, &dt, s, 1.0).unwrap();
        assert!(lc.item() <= 1e-10, "residual {}", lc.item());
    }

    #[test]
    fn random_inputs_have_nonnegative_residual() {
        let g = Graph::new();
        let mut rng = substream(15, "test");
        let (rows, d, s) = (12, 2, 4);
        let ut = g
            .constant(
                (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[rows, d],
            )
            .unwrap();
        let dt = g
            .constant(
                (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[rows, d],
            )
            .unwrap();
        let lc = continuity_residual(&ut, &dt, s, 1.0).unwrap();
        assert!(lc.item() > 0.0);
    }

    #[test]
    fn solver_head_parameters_all_receive_gradient() {
        let g = Graph::new();
        let mut rng = substream(16, "test");
        let (rows, d, s) = (8, 3, 4);
        let mk = |rng: &mut dyn rand::RngCore| {
            g.leaf(
                (0..d * d).map(|_| rng.gen_range(-0.6..0.6)).collect(),
                &[d, d],
                true,
            )
            .unwrap()
        };
        let mk_b = |rng: &mut dyn rand::RngCore| {
            g.leaf(
                (0..d).map(|_| rng.gen_range(-0.2..0.2)).collect(),
                &[d],
                true,
            )
            .unwrap()
        };
        let solver = SolverBound {
            dudt_head: Mlp { w1: mk(&mut rng), b1: mk_b(&mut rng), w2: mk(&mut rng), b2: mk_b(&mut rng) },
            u_head: Mlp { w1: mk(&mut rng), b1: mk_b(&mut rng), w2: mk(&mut rng), b2: mk_b(&mut rng) },
            out_head: Mlp { w1: mk(&mut rng), b1: mk_b(&mut rng), w2: mk(&mut rng), b2: mk_b(&mut rng) },
            patch_len: s,
        };
        let alpha = g
            .constant(
                (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[rows, d],
            )
            .unwrap();
        let parts = solve_parts(&alpha, &solver).unwrap();
        let lc = continuity_residual(&parts.u, &parts.dudt, s, 1.0).unwrap();
        let loss = parts.z.mul(&parts.z).unwrap().mean_all().add(&lc).unwrap();
        loss.backward().unwrap();
        for head in [&solver.dudt_head, &solver.u_head, &solver.out_head] {
            for t in [&head.w1, &head.b1, &head.w2, &head.b2] {
                let grad = t.grad().expect("gradient missing");
                assert!(grad.iter().any(|&v| v != 0.0), "all-zero gradient");
            }
        }
    }
}
