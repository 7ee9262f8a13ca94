//! Training objectives: smooth-L1, the horizon prediction loss on deltas,
//! and the first-difference loss. The continuity penalty lives with the
//! solver; [`LossReport`] carries all three.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Default smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Mean smooth-L1: 0.5e²/β for |e| < β, |e| − 0.5β otherwise, averaged over
/// all elements.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    Ok(pred.smooth_l1_core(target, beta)?.mean_all())
}

/// Horizon prediction loss: smooth-L1 between the decoded deltas and the
/// horizon observations expressed as deltas from the initial condition.
pub fn prediction_loss(
    decoded_deltas: &Tensor,
    horizon: &Tensor,
    x_init: &Tensor,
    beta: f64,
) -> Result<Tensor> {
    let target_deltas = horizon.add_row(&x_init.neg())?;
    smooth_l1(decoded_deltas, &target_deltas, beta)
}

/// First-difference loss over sequences that include the anchor position, so
/// the first horizon step has a predecessor on both sides. With H horizon
/// rows the inputs have H+1 rows and the loss averages the H differences.
pub fn first_difference_loss(
    predictions_full: &Tensor,
    targets_full: &Tensor,
    beta: f64,
) -> Result<Tensor> {
    if predictions_full.shape() != targets_full.shape() {
        return Err(Error::ShapeMismatch {
            op: "first_difference_loss",
            lhs: predictions_full.shape().to_vec(),
            rhs: targets_full.shape().to_vec(),
        });
    }
    let rows = predictions_full.shape()[0];
    if rows < 2 {
        return Err(Error::contract(
            "first_difference_loss: need at least two rows to form a difference",
        ));
    }
    let h = rows - 1;
    let dp = predictions_full
        .narrow(0, 1, h)?
        .sub(&predictions_full.narrow(0, 0, h)?)?;
    let dt = targets_full
        .narrow(0, 1, h)?
        .sub(&targets_full.narrow(0, 0, h)?)?;
    smooth_l1(&dp, &dt, beta)
}

/// The three objective components of one pass; `total` is their exact sum.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_p: f64, l_c: f64, l_f: f64) -> Self {
        LossReport {
            l_p,
            l_c,
            l_f,
            total: l_p + l_c + l_f,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn zero_error_is_zero_loss() {
        let g = Graph::new();
        let a = g.constant(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let b = g.constant(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        assert_eq!(smooth_l1(&a, &b, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn branch_value_at_e2_beta1() {
        let g = Graph::new();
        let a = g.constant(vec![2.0], &[1]).unwrap();
        let b = g.constant(vec![0.0], &[1]).unwrap();
        assert_eq!(smooth_l1(&a, &b, 1.0).unwrap().item(), 1.5);
    }

    #[test]
    fn matches_elementwise_loop_oracle() {
        let g = Graph::new();
        let mut rng = substream(30, "test");
        let n = 64;
        let beta = 0.7;
        let av: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let bv: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a = g.constant(av.clone(), &[n]).unwrap();
        let b = g.constant(bv.clone(), &[n]).unwrap();
        let got = smooth_l1(&a, &b, beta).unwrap().item();
        let mut want = 0.0;
        for i in 0..n {
            let e: f64 = av[i] - bv[i];
            want += if e.abs() < beta {
                0.5 * e * e / beta
            } else {
                e.abs() - 0.5 * beta
            };
        }
        want /= n as f64;
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = Graph::new();
        let a = g.constant(vec![0.0; 4], &[4]).unwrap();
        let b = g.constant(vec![0.0; 3], &[3]).unwrap();
        assert!(smooth_l1(&a, &b, 1.0).is_err());
    }

    #[test]
    fn perfect_deltas_score_zero() {
        let g = Graph::new();
        let mut rng = substream(31, "test");
        let (h, c) = (4, 2);
        let y: Vec<f64> = (0..h * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let init = vec![0.3, -0.4];
        let deltas: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(i, v)| v - init[i % c])
            .collect();
        let d = g.constant(deltas, &[h, c]).unwrap();
        let yt = g.constant(y, &[h, c]).unwrap();
        let xi = g.constant(init, &[c]).unwrap();
        assert!(prediction_loss(&d, &yt, &xi, 1.0).unwrap().item() <= 1e-15);
    }

    #[test]
    fn persistence_fixpoint_scores_zero() {
        let g = Graph::new();
        let init = vec![1.5, -2.5];
        let y = vec![1.5, -2.5, 1.5, -2.5, 1.5, -2.5];
        let d = g.constant(vec![0.0; 6], &[3, 2]).unwrap();
        let yt = g.constant(y, &[3, 2]).unwrap();
        let xi = g.constant(init, &[2]).unwrap();
        assert_eq!(prediction_loss(&d, &yt, &xi, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn first_difference_ignores_constant_offsets() {
        let g = Graph::new();
        // Linear sequences with the same slope but different intercepts.
        let pred: Vec<f64> = (0..5).map(|i| 0.5 * i as f64 + 3.0).collect();
        let targ: Vec<f64> = (0..5).map(|i| 0.5 * i as f64 - 1.0).collect();
        let p = g.constant(pred, &[5, 1]).unwrap();
        let t = g.constant(targ, &[5, 1]).unwrap();
        assert_eq!(first_difference_loss(&p, &t, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn constant_sequences_have_zero_difference_loss() {
        let g = Graph::new();
        let p = g.constant(vec![2.0; 4], &[4, 1]).unwrap();
        let t = g.constant(vec![-7.0; 4], &[4, 1]).unwrap();
        assert_eq!(first_difference_loss(&p, &t, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn too_short_sequences_are_rejected() {
        let g = Graph::new();
        let p = g.constant(vec![1.0], &[1, 1]).unwrap();
        let t = g.constant(vec![1.0], &[1, 1]).unwrap();
        assert!(first_difference_loss(&p, &t, 1.0).is_err());
    }

    #[test]
    fn report_total_is_exact_sum() {
        let r = LossReport::new(0.125, 0.25, 0.0625);
        assert_eq!(r.total, 0.125 + 0.25 + 0.0625);
        assert!(r.l_p >= 0.0 && r.l_c >= 0.0 && r.l_f >= 0.0);
    }
}
