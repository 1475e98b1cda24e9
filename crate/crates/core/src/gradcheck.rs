//! Central finite-difference oracles for gradient verification.
//!
//! The checks here evaluate the loss twice per probed coordinate through
//! pure forward passes (no tape recording), so they are independent of the
//! backward rules they verify. Relative error is
//! `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.

use crate::autodiff::{Tape, Tensor};

/// Default probe step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between an analytic and a finite-difference gradient.
pub fn rel_err(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / g_ad.abs().max(g_fd.abs()).max(1e-8)
}

/// Gradients below this magnitude move the loss by less than `f64` can
/// resolve at the probe steps used here, so the probe reads 0; absolute
/// agreement this tight counts as a pass.
pub const FD_RESOLUTION: f64 = 1e-10;

/// Checks every coordinate of every input against central differences and
/// returns the worst relative error.
///
/// `f` must build a scalar loss from the given tensors on the given tape;
/// it is called once recording (for analytic gradients) and `2n` times
/// non-recording (for the probes). Probes run in parallel.
pub fn max_grad_rel_err(
    inputs: &[Tensor],
    h: f64,
    f: &(dyn Fn(&mut Tape, &[Tensor]) -> Tensor + Sync),
) -> f64 {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    max_grad_rel_err_at(inputs, h, f, &coords)
}

/// Like [`max_grad_rel_err`] but probing only the chosen
/// `(tensor_index, element_index)` coordinates.
pub fn max_grad_rel_err_at(
    inputs: &[Tensor],
    h: f64,
    f: &(dyn Fn(&mut Tape, &[Tensor]) -> Tensor + Sync),
    coords: &[(usize, usize)],
) -> f64 {
    use rayon::prelude::*;

    // Analytic gradients.
    let mut tape = Tape::new();
    let leafed: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &leafed);
    let node_ids: Vec<usize> = leafed.iter().map(|t| t.node().unwrap()).collect();
    let grads = tape.backward(&loss).expect("loss must be a tape scalar");

    let eval = |probe: &[Tensor]| -> f64 {
        let mut tape = Tape::inference();
        f(&mut tape, probe).item()
    };

    coords
        .par_iter()
        .map(|&(i, j)| {
            let g_ad = grads.get(node_ids[i]).map_or(0.0, |g| g[j]);
            let base = inputs[i].data()[j];
            let plus = eval(&perturbed(inputs, i, j, base + h));
            let minus = eval(&perturbed(inputs, i, j, base - h));
            let g_fd = (plus - minus) / (2.0 * h);
            if (g_ad - g_fd).abs() < FD_RESOLUTION {
                0.0
            } else {
                rel_err(g_ad, g_fd)
            }
        })
        .reduce(|| 0.0, f64::max)
}

fn perturbed(inputs: &[Tensor], i: usize, j: usize, value: f64) -> Vec<Tensor> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if k == i {
                let mut data = t.data().to_vec();
                data[j] = value;
                Tensor::new(t.shape().to_vec(), data)
            } else {
                t.clone()
            }
        })
        .collect()
}

/// Least-squares solve of `rows * w ≈ targets` via normal equations with
/// partial-pivot Gaussian elimination. Small systems only; this is a test
/// oracle, not a production solver.
#[allow(clippy::needless_range_loop)] // index form mirrors the textbook elimination
pub fn lstsq(rows: &[Vec<f64>], targets: &[f64], dim: usize) -> Vec<f64> {
    assert_eq!(rows.len(), targets.len());
    let mut ata = vec![vec![0.0; dim]; dim];
    let mut atb = vec![0.0; dim];
    for (row, &t) in rows.iter().zip(targets) {
        assert_eq!(row.len(), dim);
        for i in 0..dim {
            atb[i] += row[i] * t;
            for j in 0..dim {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    // Tiny ridge keeps unsupported basis functions from making the normal
    // matrix singular.
    for i in 0..dim {
        ata[i][i] += 1e-12;
    }
    for col in 0..dim {
        let pivot = (col..dim)
            .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
            .unwrap();
        ata.swap(col, pivot);
        atb.swap(col, pivot);
        let diag = ata[col][col];
        for r in col + 1..dim {
            let factor = ata[r][col] / diag;
            if factor == 0.0 {
                continue;
            }
            for c in col..dim {
                ata[r][c] -= factor * ata[col][c];
            }
            atb[r] -= factor * atb[col];
        }
    }
    let mut w = vec![0.0; dim];
    for r in (0..dim).rev() {
        let mut acc = atb[r];
        for c in r + 1..dim {
            acc -= ata[r][c] * w[c];
        }
        w[r] = acc / ata[r][r];
    }
    w
}

/// Deterministic pseudo-random tensor for oracle inputs.
pub fn seeded_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data)
}
