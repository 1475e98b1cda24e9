//! AdamW with decoupled weight decay and the cosine annealing schedule.

use super::TrainError;
use crate::autodiff::Tensor;
use crate::kunet::KUnetParams;

const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first and second moments plus the shared step counter,
/// aligned with [`KUnetParams::named`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl OptimizerState {
    pub fn for_params(named: &[(String, Tensor)]) -> Self {
        let m = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { m, v, step: 0 }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `(m, v)` pairs in parameter order.
    pub fn moments(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.m.iter().map(|m| m.as_slice()).zip(self.v.iter().map(|v| v.as_slice()))
    }
}

/// One AdamW update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected, then
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + 1e-8) + wd * theta)`.
///
/// The decay term multiplies the raw parameter, not the gradient, so with
/// `g = 0` the update is exactly `theta *= 1 - lr*wd`.
pub fn adamw_step(
    params: &mut KUnetParams,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut index = 0;
    params.update_tensors(&mut |tensor| {
        let g = &grads[index];
        let m = &mut state.m[index];
        let v = &mut state.v[index];
        let mut data = tensor.data().to_vec();
        let decay = 1.0 - lr * weight_decay;
        for j in 0..data.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            // Factored form of theta - lr*(adaptive + wd*theta): pure decay
            // (g = 0) is then an exact multiplicative shrink.
            data[j] = data[j] * decay - lr * (m_hat / (v_hat.sqrt() + ADAM_EPS));
        }
        tensor.replace_data(data);
        index += 1;
    });
    assert_eq!(index, grads.len(), "gradient count mismatch");
}

/// Cosine annealing: `lr_min + (lr_max - lr_min)(1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if t > total {
        return Err(TrainError::ScheduleOutOfRange { t, total });
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kunet::ModelConfig;

    fn tiny_params() -> KUnetParams {
        let cfg = ModelConfig {
            base_channels: 2,
            levels: 1,
            event_bins: 2,
            heads: 2,
            token_dim: 4,
            kan_grid: 4,
            kan_degree: 2,
            image_channels: 3,
        };
        KUnetParams::init(&cfg, 7).unwrap()
    }

    fn zero_grads(params: &KUnetParams) -> Vec<Vec<f64>> {
        params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = tiny_params();
        let before = params.named();
        let grads = zero_grads(&params);
        let mut state = OptimizerState::for_params(&before);
        adamw_step(&mut params, &grads, &mut state, 1e-3, 0.9, 0.99, 0.0);
        for ((_, a), (_, b)) in before.iter().zip(params.named()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zero_grad_with_decay_shrinks_exactly() {
        let mut params = tiny_params();
        let before = params.named();
        let grads = zero_grads(&params);
        let mut state = OptimizerState::for_params(&before);
        let (lr, wd) = (0.01, 0.1);
        adamw_step(&mut params, &grads, &mut state, lr, 0.9, 0.99, wd);
        for ((_, a), (_, b)) in before.iter().zip(params.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, x * (1.0 - lr * wd), "pure decay must be exact");
            }
        }
    }

    #[test]
    fn first_step_is_signed_unit_step() {
        // With constant gradient and no decay, bias correction makes the
        // first update lr * sign(g) up to epsilon.
        let mut params = tiny_params();
        let before = params.named();
        let grads: Vec<Vec<f64>> = before
            .iter()
            .enumerate()
            .map(|(i, (_, t))| vec![if i % 2 == 0 { 3.5 } else { -1.25 }; t.numel()])
            .collect();
        let mut state = OptimizerState::for_params(&before);
        let lr = 1e-3;
        adamw_step(&mut params, &grads, &mut state, lr, 0.9, 0.99, 0.0);
        for (i, ((_, a), (_, b))) in before.iter().zip(params.named()).enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for (x, y) in a.data().iter().zip(b.data()) {
                let step = x - y;
                assert!(
                    (step - lr * sign).abs() < 1e-6,
                    "step {step} should be ~{}",
                    lr * sign
                );
            }
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let (lo, hi) = (1e-7, 2e-4);
        assert_eq!(cosine_lr(0, 100, hi, lo).unwrap(), hi);
        assert_eq!(cosine_lr(100, 100, hi, lo).unwrap(), lo);
        let mid = cosine_lr(50, 100, hi, lo).unwrap();
        assert!((mid - (hi + lo) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn cosine_is_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for t in 0..=200 {
            let lr = cosine_lr(t, 200, 2e-4, 1e-7).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn cosine_rejects_overrun() {
        assert!(matches!(
            cosine_lr(101, 100, 1.0, 0.0),
            Err(TrainError::ScheduleOutOfRange { .. })
        ));
    }
}
