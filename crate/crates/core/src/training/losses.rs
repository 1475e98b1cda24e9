//! Training objectives, all built from tape primitives so gradients flow.

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::repr::EdgeMap;

/// `lambda1 * mean|pred - gt| + lambda2 * mean(pred - gt)^2`.
pub fn loss_reconstruction(
    tape: &mut Tape,
    pred: &Tensor,
    gt: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor, AutodiffError> {
    let diff = tape.sub(pred, gt)?;
    let l1 = tape.abs(&diff);
    let l1 = tape.mean_all(&l1);
    let sq = tape.mul(&diff, &diff)?;
    let l2 = tape.mean_all(&sq);
    let l1 = tape.scale(&l1, lambda1);
    let l2 = tape.scale(&l2, lambda2);
    tape.add(&l1, &l2)
}

/// Guard inside the PSNR logarithm and the optimizer denominator.
pub const PSNR_EPS: f64 = 1e-8;

/// `weight * 10 * log10(mean((pred-gt)^2) + eps)`: the negated PSNR up to a
/// constant, so minimizing it maximizes PSNR (peak fixed at 1).
pub fn loss_psnr(
    tape: &mut Tape,
    pred: &Tensor,
    gt: &Tensor,
    weight: f64,
) -> Result<Tensor, AutodiffError> {
    let diff = tape.sub(pred, gt)?;
    let sq = tape.mul(&diff, &diff)?;
    let mse = tape.mean_all(&sq);
    let guarded = tape.add_scalar(&mse, PSNR_EPS);
    let log = tape.ln(&guarded);
    Ok(tape.scale(&log, weight * 10.0 / std::f64::consts::LN_10))
}

/// Floor under the Sobel magnitude so its square root stays differentiable.
const EDGE_MAG_EPS: f64 = 1e-12;

/// Mean squared error between the masked Sobel edge magnitude of the
/// prediction's luminance and the motion-edge frame:
/// `mean((edge(pred) * m - e)^2)`.
pub fn loss_motion_edge(
    tape: &mut Tape,
    pred: &Tensor,
    edge: &EdgeMap,
) -> Result<Tensor, AutodiffError> {
    let s = pred.shape();
    if s.len() != 3 || s[1] != edge.height || s[2] != edge.width {
        return Err(AutodiffError::ShapeMismatch {
            op: "loss_motion_edge",
            lhs: s.to_vec(),
            rhs: vec![s.first().copied().unwrap_or(0), edge.height, edge.width],
        });
    }
    let channels = s[0];
    let (h, w) = (edge.height, edge.width);

    // Luminance via a constant 1x1 conv averaging the channels.
    let luma_w = Tensor::full(vec![1, channels, 1, 1], 1.0 / channels as f64);
    let luma = tape.conv2d(pred, &luma_w, None, 1, 0)?;

    let sobel_x = Tensor::new(
        vec![1, 1, 3, 3],
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    );
    let sobel_y = Tensor::new(
        vec![1, 1, 3, 3],
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    );
    let gx = tape.conv2d(&luma, &sobel_x, None, 1, 1)?;
    let gy = tape.conv2d(&luma, &sobel_y, None, 1, 1)?;
    let gx2 = tape.mul(&gx, &gx)?;
    let gy2 = tape.mul(&gy, &gy)?;
    let energy = tape.add(&gx2, &gy2)?;
    let energy = tape.add_scalar(&energy, EDGE_MAG_EPS);
    let magnitude = tape.sqrt(&energy);

    let mask = Tensor::new(vec![1, h, w], edge.m.clone());
    let target = Tensor::new(vec![1, h, w], edge.e.clone());
    let masked = tape.mul(&magnitude, &mask)?;
    let diff = tape.sub(&masked, &target)?;
    let sq = tape.mul(&diff, &diff)?;
    Ok(tape.mean_all(&sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::repr::EdgeMap;

    #[test]
    fn reconstruction_zero_on_equal() {
        let mut tape = Tape::inference();
        let x = gradcheck::seeded_tensor(vec![3, 4, 4], 1, 0.0, 1.0);
        let loss = loss_reconstruction(&mut tape, &x, &x, 1.0, 1.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn reconstruction_constant_half_difference() {
        let mut tape = Tape::inference();
        let a = Tensor::full(vec![2, 2], 0.75);
        let b = Tensor::full(vec![2, 2], 0.25);
        let loss = loss_reconstruction(&mut tape, &a, &b, 1.0, 1.0).unwrap();
        assert!((loss.item() - 0.75).abs() < 1e-12); // 0.5 + 0.25
    }

    #[test]
    fn psnr_loss_at_equality_hits_epsilon_floor() {
        let mut tape = Tape::inference();
        let x = Tensor::full(vec![4], 0.3);
        let loss = loss_psnr(&mut tape, &x, &x, 0.5).unwrap();
        assert!((loss.item() - (-40.0)).abs() < 1e-9, "{}", loss.item());
    }

    #[test]
    fn psnr_loss_hand_value() {
        // MSE = 0.01 with weight 0.5 gives 0.5 * 10 * log10(0.01) = -10.
        let mut tape = Tape::inference();
        let a = Tensor::full(vec![8], 0.5);
        let b = Tensor::full(vec![8], 0.6);
        let loss = loss_psnr(&mut tape, &a, &b, 0.5).unwrap();
        assert!((loss.item() - (-10.0)).abs() < 1e-4, "{}", loss.item());
    }

    #[test]
    fn psnr_loss_weight_is_linear() {
        let a = gradcheck::seeded_tensor(vec![2, 3, 3], 5, 0.0, 1.0);
        let b = gradcheck::seeded_tensor(vec![2, 3, 3], 6, 0.0, 1.0);
        let mut tape = Tape::inference();
        let l1 = loss_psnr(&mut tape, &a, &b, 1.0).unwrap();
        let l2 = loss_psnr(&mut tape, &a, &b, 2.0).unwrap();
        assert!((2.0 * l1.item() - l2.item()).abs() < 1e-12);
    }

    #[test]
    fn edge_loss_ignores_pred_when_mask_is_zero() {
        let e = vec![0.5; 16];
        let edge = EdgeMap {
            height: 4,
            width: 4,
            e: e.clone(),
            m: vec![0.0; 16],
            tau: 0.1,
        };
        let mut tape = Tape::inference();
        let p1 = gradcheck::seeded_tensor(vec![3, 4, 4], 1, 0.0, 1.0);
        let p2 = gradcheck::seeded_tensor(vec![3, 4, 4], 2, 0.0, 1.0);
        let l1 = loss_motion_edge(&mut tape, &p1, &edge).unwrap();
        let l2 = loss_motion_edge(&mut tape, &p2, &edge).unwrap();
        assert_eq!(l1.item(), l2.item());
        let expected = e.iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!((l1.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn edge_loss_zero_when_everything_zero() {
        let edge = EdgeMap {
            height: 4,
            width: 4,
            e: vec![0.0; 16],
            m: vec![0.0; 16],
            tau: 0.1,
        };
        let mut tape = Tape::inference();
        let p = gradcheck::seeded_tensor(vec![3, 4, 4], 3, 0.0, 1.0);
        let loss = loss_motion_edge(&mut tape, &p, &edge).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let pred = gradcheck::seeded_tensor(vec![3, 8, 8], 10, 0.1, 0.9);
        let gt = gradcheck::seeded_tensor(vec![3, 8, 8], 11, 0.1, 0.9);
        let edge = {
            let e = gradcheck::seeded_tensor(vec![64], 12, 0.0, 1.0);
            EdgeMap {
                height: 8,
                width: 8,
                e: e.data().to_vec(),
                m: e.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
                tau: 0.5,
            }
        };
        let gt2 = gt.clone();
        let err = gradcheck::max_grad_rel_err(&[pred], gradcheck::DEFAULT_STEP, &|tape, ins| {
            let rec = loss_reconstruction(tape, &ins[0], &gt2, 0.7, 1.3).unwrap();
            let psnr = loss_psnr(tape, &ins[0], &gt2, 0.5).unwrap();
            let edge_l = loss_motion_edge(tape, &ins[0], &edge).unwrap();
            let a = tape.add(&rec, &psnr).unwrap();
            tape.add(&a, &edge_l).unwrap()
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_components() {
        let pred = gradcheck::seeded_tensor(vec![3, 4, 4], 20, 0.1, 0.9);
        let gt = gradcheck::seeded_tensor(vec![3, 4, 4], 21, 0.1, 0.9);
        let grad_of = |w_rec: f64, w_psnr: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let p = tape.leaf(&pred);
            let rec = loss_reconstruction(&mut tape, &p, &gt, w_rec, w_rec).unwrap();
            let ps = loss_psnr(&mut tape, &p, &gt, w_psnr).unwrap();
            let total = tape.add(&rec, &ps).unwrap();
            let mut grads = tape.backward(&total).unwrap();
            grads.take(p.node().unwrap()).unwrap()
        };
        let g_rec = grad_of(1.0, 0.0);
        let g_psnr = grad_of(0.0, 0.5);
        let g_both = grad_of(1.0, 0.5);
        for i in 0..g_both.len() {
            assert!(
                (g_both[i] - (g_rec[i] + g_psnr[i])).abs() < 1e-10,
                "component linearity failed at {i}"
            );
        }
    }
}
