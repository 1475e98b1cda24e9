//! B-spline basis machinery and spline-augmented linear layers.
//!
//! A spline layer computes `y = silu(x) W_base^T + B(x) W_spline^T`, where
//! `B(x)` concatenates the B-spline basis values of every input coordinate
//! on a shared uniform grid. The spline path gives each input-output edge a
//! learned univariate function; the silu path keeps gradients alive outside
//! the grid domain.

use crate::autodiff::{AutodiffError, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KanError {
    #[error("grid needs g_min < g_max, got [{0}, {1}]")]
    BadDomain(f64, f64),
    #[error("grid needs at least one interval")]
    NoIntervals,
    #[error("layer dims must be positive")]
    BadDims,
}

/// A uniform extended knot grid for degree-`degree` B-splines over
/// `[g_min, g_max]` with `intervals` interior intervals.
///
/// The knot vector has `intervals + 2*degree + 1` entries: `degree` knots
/// extend past each end at the interior spacing, giving
/// `intervals + degree` basis functions per scalar input.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    pub g_min: f64,
    pub g_max: f64,
    pub intervals: usize,
    pub degree: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn uniform(
        g_min: f64,
        g_max: f64,
        intervals: usize,
        degree: usize,
    ) -> Result<Self, KanError> {
        if !matches!(g_min.partial_cmp(&g_max), Some(std::cmp::Ordering::Less)) {
            return Err(KanError::BadDomain(g_min, g_max));
        }
        if intervals == 0 {
            return Err(KanError::NoIntervals);
        }
        let h = (g_max - g_min) / intervals as f64;
        let n_knots = intervals + 2 * degree + 1;
        let knots = (0..n_knots)
            .map(|i| g_min + (i as f64 - degree as f64) * h)
            .collect();
        Ok(Self {
            g_min,
            g_max,
            intervals,
            degree,
            knots,
        })
    }

    /// Number of degree-`p` basis functions: `G + p`.
    pub fn basis_count(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// All degree-`p` basis values at `x` by the Cox-de Boor recursion,
    /// with `0/0 := 0`.
    ///
    /// Degree-0 bases are half-open indicators `t_k <= x < t_{k+1}`, so any
    /// `x` in `[g_min, g_max)` yields a partition of unity; far outside the
    /// extended knots every basis is zero.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        self.basis_impl(x).0
    }

    /// Basis values together with their first derivatives at `x`.
    pub fn basis_and_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let (basis, lower) = self.basis_impl(x);
        let p = self.degree;
        let count = self.basis_count();
        let mut deriv = vec![0.0; count];
        if p == 0 {
            return (basis, deriv);
        }
        let t = &self.knots;
        for k in 0..count {
            let d1 = t[k + p] - t[k];
            let a = if d1 != 0.0 { lower[k] / d1 } else { 0.0 };
            let d2 = t[k + p + 1] - t[k + 1];
            let b = if d2 != 0.0 { lower[k + 1] / d2 } else { 0.0 };
            deriv[k] = p as f64 * (a - b);
        }
        (basis, deriv)
    }

    /// Runs the recursion triangle once, returning the degree-`p` values and
    /// the degree-`p-1` values (used for derivatives; empty when `p == 0`).
    fn basis_impl(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let t = &self.knots;
        let p = self.degree;
        let mut n: Vec<f64> = (0..t.len() - 1)
            .map(|k| if t[k] <= x && x < t[k + 1] { 1.0 } else { 0.0 })
            .collect();
        let mut lower = Vec::new();
        for q in 1..=p {
            if q == p {
                lower = n[..t.len() - q].to_vec();
            }
            for k in 0..t.len() - 1 - q {
                let d1 = t[k + q] - t[k];
                let a = if d1 != 0.0 {
                    (x - t[k]) / d1 * n[k]
                } else {
                    0.0
                };
                let d2 = t[k + q + 1] - t[k + 1];
                let b = if d2 != 0.0 {
                    (t[k + q + 1] - x) / d2 * n[k + 1]
                } else {
                    0.0
                };
                n[k] = a + b;
            }
        }
        n.truncate(self.basis_count());
        (n, lower)
    }
}

/// Parameters of one spline-augmented linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out, in]` weights on the silu path.
    pub w_base: Tensor,
    /// `[out, in * basis_count]` weights on the spline path.
    pub w_spline: Tensor,
    pub grid: SplineGrid,
}

impl KanLayerParams {
    /// Seeded initialization: `W_base` uniform in `±sqrt(6/(in+out))`,
    /// `W_spline` uniform noise scaled by `0.1/sqrt(basis_count)`, grid on
    /// `[-1, 1]`.
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        intervals: usize,
        degree: usize,
        seed: u64,
    ) -> Result<Self, KanError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(KanError::BadDims);
        }
        let grid = SplineGrid::uniform(-1.0, 1.0, intervals, degree)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w_base: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let k = grid.basis_count();
        let spline_bound = 0.1 / (k as f64).sqrt();
        let w_spline: Vec<f64> = (0..out_dim * in_dim * k)
            .map(|_| rng.gen_range(-spline_bound..spline_bound))
            .collect();
        Ok(Self {
            in_dim,
            out_dim,
            w_base: Tensor::new(vec![out_dim, in_dim], w_base),
            w_spline: Tensor::new(vec![out_dim, in_dim * k], w_spline),
            grid,
        })
    }

    /// The grid as a `[g_min, g_max, G, p]` tensor for checkpoints.
    pub fn grid_meta(&self) -> Tensor {
        Tensor::new(
            vec![4],
            vec![
                self.grid.g_min,
                self.grid.g_max,
                self.grid.intervals as f64,
                self.grid.degree as f64,
            ],
        )
    }

    /// Rebuilds a layer from checkpoint tensors.
    pub fn from_tensors(
        w_base: Tensor,
        w_spline: Tensor,
        grid_meta: &Tensor,
    ) -> Result<Self, KanError> {
        let meta = grid_meta.data();
        if meta.len() != 4 {
            return Err(KanError::BadDims);
        }
        let grid = SplineGrid::uniform(meta[0], meta[1], meta[2] as usize, meta[3] as usize)?;
        let shape = w_base.shape().to_vec();
        if shape.len() != 2 {
            return Err(KanError::BadDims);
        }
        let (out_dim, in_dim) = (shape[0], shape[1]);
        if w_spline.shape() != [out_dim, in_dim * grid.basis_count()] {
            return Err(KanError::BadDims);
        }
        Ok(Self {
            in_dim,
            out_dim,
            w_base,
            w_spline,
            grid,
        })
    }
}

/// Expands `[batch, in]` inputs to `[batch, in * basis_count]` B-spline
/// basis rows, differentiable in `x` via the basis derivative recurrence.
pub fn bspline_expand(
    tape: &mut Tape,
    x: &Tensor,
    grid: &SplineGrid,
) -> Result<Tensor, AutodiffError> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(AutodiffError::BadShape {
            op: "bspline_expand",
            msg: format!("expected [batch, in], got {xs:?}"),
        });
    }
    let (batch, in_dim) = (xs[0], xs[1]);
    let k = grid.basis_count();
    let record_grads = tape.is_enabled() && x.node().is_some();
    let mut out = vec![0.0; batch * in_dim * k];
    let mut deriv = if record_grads {
        vec![0.0; batch * in_dim * k]
    } else {
        Vec::new()
    };
    for (i, &xv) in x.data().iter().enumerate() {
        if record_grads {
            let (b, d) = grid.basis_and_derivative(xv);
            out[i * k..(i + 1) * k].copy_from_slice(&b);
            deriv[i * k..(i + 1) * k].copy_from_slice(&d);
        } else {
            let b = grid.basis(xv);
            out[i * k..(i + 1) * k].copy_from_slice(&b);
        }
    }
    let xn = x.node();
    let n_in = batch * in_dim;
    Ok(tape.record(
        xn.is_some(),
        vec![batch, in_dim * k],
        Arc::new(out),
        move || {
            Box::new(move |gout, store| {
                let buf = store.buf(xn.expect("attached"), n_in);
                for i in 0..n_in {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += gout[i * k + j] * deriv[i * k + j];
                    }
                    buf[i] += acc;
                }
            })
        },
    ))
}

/// Applies a spline layer: `y = silu(x) W_base^T + B(x) W_spline^T`.
pub fn kan_forward(
    tape: &mut Tape,
    x: &Tensor,
    params: &KanLayerParams,
) -> Result<Tensor, AutodiffError> {
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != params.in_dim {
        return Err(AutodiffError::ShapeMismatch {
            op: "kan_forward",
            lhs: xs.to_vec(),
            rhs: vec![xs.first().copied().unwrap_or(0), params.in_dim],
        });
    }
    let sx = tape.silu(x);
    let wb_t = tape.transpose(&params.w_base)?;
    let base = tape.matmul(&sx, &wb_t)?;
    let bx = bspline_expand(tape, x, &params.grid)?;
    let ws_t = tape.transpose(&params.w_spline)?;
    let spline = tape.matmul(&bx, &ws_t)?;
    tape.add(&base, &spline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn degree_zero_basis_is_one_hot() {
        let grid = SplineGrid::uniform(0.0, 4.0, 4, 0).unwrap();
        let b = grid.basis(2.5);
        assert_eq!(b.len(), 4);
        assert_eq!(b, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn partition_of_unity_cubic() {
        let grid = SplineGrid::uniform(-1.0, 1.0, 8, 3).unwrap();
        for i in 0..200 {
            let x = -1.0 + 2.0 * i as f64 / 200.0; // in [-1, 1)
            let sum: f64 = grid.basis(x).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} at x={x}");
        }
    }

    #[test]
    fn local_support_bound() {
        for degree in [1usize, 2, 3] {
            let grid = SplineGrid::uniform(-1.0, 1.0, 8, degree).unwrap();
            for i in 0..100 {
                let x = -1.0 + 2.0 * i as f64 / 100.0;
                let nonzero = grid.basis(x).iter().filter(|&&v| v != 0.0).count();
                assert!(
                    nonzero <= degree + 1,
                    "{nonzero} nonzero bases at degree {degree}"
                );
            }
        }
    }

    #[test]
    fn basis_derivative_matches_finite_differences() {
        let grid = SplineGrid::uniform(-1.0, 1.0, 6, 3).unwrap();
        let h = 1e-6;
        for i in 0..50 {
            let x = -0.95 + 1.9 * i as f64 / 50.0;
            let (_, deriv) = grid.basis_and_derivative(x);
            let plus = grid.basis(x + h);
            let minus = grid.basis(x - h);
            for k in 0..grid.basis_count() {
                let fd = (plus[k] - minus[k]) / (2.0 * h);
                let err = gradcheck::rel_err(deriv[k], fd);
                // Absolute fallback where the true derivative is 0 and the
                // probe picks up pure rounding noise.
                assert!(
                    err < 1e-6 || (deriv[k] - fd).abs() < 1e-9,
                    "basis {k} at x={x}: ad {} fd {fd}",
                    deriv[k]
                );
            }
        }
    }

    #[test]
    fn far_outside_domain_all_zero() {
        let grid = SplineGrid::uniform(-1.0, 1.0, 8, 3).unwrap();
        assert!(grid.basis(100.0).iter().all(|&v| v == 0.0));
        assert!(grid.basis(-100.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_spline_path_reduces_to_silu() {
        let mut params = KanLayerParams::init(2, 2, 4, 3, 9).unwrap();
        params.w_spline = Tensor::zeros(params.w_spline.shape().to_vec());
        params.w_base = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::inference();
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.7]);
        let y = kan_forward(&mut tape, &x, &params).unwrap();
        let silu = |v: f64| v / (1.0 + (-v).exp());
        assert!((y.data()[0] - silu(0.3)).abs() < 1e-12);
        assert!((y.data()[1] - silu(-0.7)).abs() < 1e-12);
    }

    #[test]
    fn zero_input_zero_spline_gives_zero() {
        let mut params = KanLayerParams::init(3, 2, 4, 3, 11).unwrap();
        params.w_spline = Tensor::zeros(params.w_spline.shape().to_vec());
        let mut tape = Tape::inference();
        let x = Tensor::zeros(vec![1, 3]);
        let y = kan_forward(&mut tape, &x, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = KanLayerParams::init(4, 4, 8, 3, 42).unwrap();
        let b = KanLayerParams::init(4, 4, 8, 3, 42).unwrap();
        let c = KanLayerParams::init(4, 4, 8, 3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let params = KanLayerParams::init(3, 2, 4, 3, 5).unwrap();
        let x = gradcheck::seeded_tensor(vec![2, 3], 17, -0.9, 0.9);
        let grid = params.grid.clone();
        let inputs = [x, params.w_base.clone(), params.w_spline.clone()];
        let err = gradcheck::max_grad_rel_err(&inputs, gradcheck::DEFAULT_STEP, &|tape, ins| {
            let p = KanLayerParams {
                in_dim: 3,
                out_dim: 2,
                w_base: ins[1].clone(),
                w_spline: ins[2].clone(),
                grid: grid.clone(),
            };
            let y = kan_forward(tape, &ins[0], &p).unwrap();
            let sq = tape.mul(&y, &y).unwrap();
            tape.sum_all(&sq)
        });
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn output_magnitude_stays_reasonable() {
        // Monte-Carlo sanity: roughly unit-variance inputs through 100 seeds.
        let mut worst_lo = f64::INFINITY;
        let mut worst_hi: f64 = 0.0;
        for seed in 0..100 {
            let params = KanLayerParams::init(8, 8, 8, 3, seed).unwrap();
            let x = gradcheck::seeded_tensor(vec![16, 8], seed + 1000, -1.7, 1.7);
            let mut tape = Tape::inference();
            let y = kan_forward(&mut tape, &x, &params).unwrap();
            let rms =
                (y.data().iter().map(|v| v * v).sum::<f64>() / y.numel() as f64).sqrt();
            worst_lo = worst_lo.min(rms);
            worst_hi = worst_hi.max(rms);
        }
        assert!(worst_lo > 0.01, "rms collapsed to {worst_lo}");
        assert!(worst_hi < 10.0, "rms exploded to {worst_hi}");
    }

    #[test]
    fn cubic_fit_via_least_squares_oracle() {
        // Fit f(x) = x^3 on [-1,1] with W_base = 0: the spline path alone
        // must reproduce the cubic almost exactly.
        let grid = SplineGrid::uniform(-1.0, 1.0, 8, 3).unwrap();
        let k = grid.basis_count();
        let n = 400;
        let mut rows = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let x = -1.0 + 2.0 * i as f64 / n as f64;
            rows.push(grid.basis(x));
            targets.push(x * x * x);
        }
        let w = gradcheck::lstsq(&rows, &targets, k);
        let params = KanLayerParams {
            in_dim: 1,
            out_dim: 1,
            w_base: Tensor::zeros(vec![1, 1]),
            w_spline: Tensor::new(vec![1, k], w),
            grid,
        };
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let x = -0.995 + 1.99 * i as f64 / 100.0;
            let mut tape = Tape::inference();
            let xt = Tensor::new(vec![1, 1], vec![x]);
            let y = kan_forward(&mut tape, &xt, &params).unwrap();
            worst = worst.max((y.item() - x * x * x).abs());
        }
        assert!(worst < 1e-3, "max cubic fit error {worst}");
    }
}
