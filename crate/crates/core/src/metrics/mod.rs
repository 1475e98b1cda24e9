//! Challenge-protocol evaluation: PSNR, SSIM, directory scoring, output
//! averaging, and test-time flip augmentation.

use crate::events::{load_image_pnm, ImagePlane, PnmError};
use crate::repr::VoxelGrid;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("images have different shapes: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("image {h}x{w} smaller than the 11x11 SSIM window")]
    TooSmall { h: usize, w: usize },
    #[error("no prediction for {0:?} in the reference directory")]
    MissingCounterpart(String),
    #[error("no image files found in {0}")]
    EmptyDir(String),
    #[error("ensemble needs at least one output")]
    EmptyEnsemble,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Pnm {
        path: String,
        #[source]
        source: PnmError,
    },
}

fn check_shapes(a: &ImagePlane, b: &ImagePlane) -> Result<(), MetricError> {
    let sa = (a.height, a.width, a.channels);
    let sb = (b.height, b.width, b.channels);
    if sa != sb {
        return Err(MetricError::ShapeMismatch(sa, sb));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images score the documented
/// 100 dB cap.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean structural similarity with the reference 11x11 Gaussian window
/// (sigma 1.5) on the `[0,1]` scale, averaged over channels. Only fully
/// covered window positions contribute.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            h: a.height,
            w: a.width,
        });
    }
    let kernel = gaussian_window();
    let positions_y = a.height - SSIM_WINDOW + 1;
    let positions_x = a.width - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for ch in 0..a.channels {
        let mut channel_sum = 0.0;
        for y0 in 0..positions_y {
            for x0 in 0..positions_x {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let w = kernel[wy * SSIM_WINDOW + wx];
                        let va = a.get(y0 + wy, x0 + wx, ch);
                        let vb = b.get(y0 + wy, x0 + wx, ch);
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                channel_sum += num / den;
            }
        }
        total += channel_sum / (positions_y * positions_x) as f64;
    }
    Ok(total / a.channels as f64)
}

/// One evaluated image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image rows plus their arithmetic mean.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<ScoreRow>,
    pub mean: ScoreRow,
}

impl EvalReport {
    /// `name,psnr_db,ssim` rows followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim\n");
        for row in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", row.name, row.psnr, row.ssim));
        }
        out.push_str(&format!("MEAN,{:.6},{:.6}\n", self.mean.psnr, self.mean.ssim));
        out
    }
}

/// Evaluation preprocessing options.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Quantize both images through 8-bit before scoring, for parity with
    /// file-based challenge scoring.
    pub quantize: bool,
    /// Score on the luminance plane instead of averaging RGB channels.
    pub luma: bool,
}

fn quantize_image(img: &ImagePlane) -> ImagePlane {
    let data: Vec<f64> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    ImagePlane::new(img.height, img.width, img.channels, data).expect("quantized values in range")
}

/// Scores one pair under the given options.
pub fn score_pair(
    pred: &ImagePlane,
    gt: &ImagePlane,
    opts: EvalOptions,
) -> Result<(f64, f64), MetricError> {
    let (mut p, mut g) = (pred.clone(), gt.clone());
    if opts.quantize {
        p = quantize_image(&p);
        g = quantize_image(&g);
    }
    if opts.luma {
        p = p.luma();
        g = g.luma();
    }
    Ok((psnr(&p, &g, 1.0)?, ssim(&p, &g)?))
}

/// Scores every image in `pred_dir` against its same-named counterpart in
/// `gt_dir`, in filename order.
pub fn evaluate_dir(
    pred_dir: &Path,
    gt_dir: &Path,
    opts: EvalOptions,
) -> Result<EvalReport, MetricError> {
    let mut names: Vec<String> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm") || n.ends_with(".pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(MetricError::EmptyDir(pred_dir.display().to_string()));
    }
    let load = |path: &Path| -> Result<ImagePlane, MetricError> {
        let bytes = std::fs::read(path)?;
        load_image_pnm(&bytes).map_err(|source| MetricError::Pnm {
            path: path.display().to_string(),
            source,
        })
    };
    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let gt_path = gt_dir.join(name);
        if !gt_path.exists() {
            return Err(MetricError::MissingCounterpart(name.clone()));
        }
        let pred = load(&pred_dir.join(name))?;
        let gt = load(&gt_path)?;
        let (p, s) = score_pair(&pred, &gt, opts)?;
        rows.push(ScoreRow {
            name: name.clone(),
            psnr: p,
            ssim: s,
        });
    }
    let n = rows.len() as f64;
    let mean = ScoreRow {
        name: "MEAN".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    Ok(EvalReport { rows, mean })
}

/// Per-pixel arithmetic mean of the outputs, clamped to `[0,1]`.
///
/// The mean is computed as `first + mean(output - first)`, so averaging
/// identical outputs returns them bit-for-bit (idempotence).
pub fn ensemble_average(outputs: &[ImagePlane]) -> Result<ImagePlane, MetricError> {
    let first = outputs.first().ok_or(MetricError::EmptyEnsemble)?;
    for o in outputs {
        check_shapes(first, o)?;
    }
    let n = outputs.len() as f64;
    let mut dev = vec![0.0; first.data().len()];
    for o in &outputs[1..] {
        for ((acc, &v), &v0) in dev.iter_mut().zip(o.data()).zip(first.data()) {
            *acc += v - v0;
        }
    }
    let data: Vec<f64> = first
        .data()
        .iter()
        .zip(&dev)
        .map(|(&v0, &d)| (v0 + d / n).clamp(0.0, 1.0))
        .collect();
    Ok(ImagePlane::new(first.height, first.width, first.channels, data)
        .expect("averaged values stay in range"))
}

/// Test-time flip augmentation: runs the model on the identity, horizontal,
/// vertical, and double flips of the input pair, inverts each transform on
/// the output, and averages.
pub fn tta_flip_infer<E, F>(
    model: &mut F,
    img: &ImagePlane,
    voxels: &VoxelGrid,
) -> Result<ImagePlane, E>
where
    E: From<MetricError>,
    F: FnMut(&ImagePlane, &VoxelGrid) -> Result<ImagePlane, E>,
{
    let mut outputs = Vec::with_capacity(4);
    // (flip_h, flip_v); each transform is its own inverse.
    for (fh, fv) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut i = img.clone();
        let mut v = voxels.clone();
        if fh {
            i = i.hflip();
            v = v.hflip();
        }
        if fv {
            i = i.vflip();
            v = v.vflip();
        }
        let mut out = model(&i, &v)?;
        if fv {
            out = out.vflip();
        }
        if fh {
            out = out.hflip();
        }
        outputs.push(out);
    }
    Ok(ensemble_average(&outputs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize, c: usize, v: f64) -> ImagePlane {
        ImagePlane::new(h, w, c, vec![v; h * w * c]).unwrap()
    }

    #[test]
    fn psnr_cap_on_identical() {
        let a = constant(4, 4, 3, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
    }

    #[test]
    fn psnr_constant_difference() {
        let a = constant(8, 8, 1, 100.0 / 255.0);
        let b = constant(8, 8, 1, 116.0 / 255.0);
        let expected = 10.0 * (255.0f64 * 255.0 / (16.0 * 16.0)).log10();
        let got = psnr(&a, &b, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((got - 24.0487).abs() < 1e-3);
    }

    #[test]
    fn psnr_full_scale_difference_is_zero() {
        let a = constant(4, 4, 1, 0.0);
        let b = constant(4, 4, 1, 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = constant(4, 4, 1, 0.0);
        let b = constant(4, 5, 1, 0.0);
        assert!(matches!(
            psnr(&a, &b, 1.0),
            Err(MetricError::ShapeMismatch(_, _))
        ));
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let mut img = ImagePlane::zeros(16, 16, 3);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    img.set(y, x, c, ((y * 31 + x * 7 + c * 3) % 256) as f64 / 255.0);
                }
            }
        }
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_match_hand_formula() {
        let a = constant(12, 12, 1, 0.2);
        let b = constant(12, 12, 1, 0.4);
        // Variance terms collapse; second factor is C2/C2 = 1.
        let expected = (2.0 * 0.2 * 0.4 + SSIM_C1) / (0.2f64.powi(2) + 0.4f64.powi(2) + SSIM_C1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = constant(12, 12, 1, 0.3);
        let mut b = constant(12, 12, 1, 0.3);
        b.set(5, 5, 0, 0.9);
        b.set(2, 8, 0, 0.1);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = constant(8, 8, 1, 0.3);
        assert!(matches!(
            ssim(&a, &a),
            Err(MetricError::TooSmall { h: 8, w: 8 })
        ));
    }

    #[test]
    fn ensemble_basics() {
        let x = constant(2, 2, 1, 0.0);
        let y = constant(2, 2, 1, 1.0);
        assert_eq!(ensemble_average(std::slice::from_ref(&x)).unwrap(), x);
        assert_eq!(
            ensemble_average(&[y.clone(), y.clone()]).unwrap(),
            y
        );
        assert_eq!(
            ensemble_average(&[x, y]).unwrap(),
            constant(2, 2, 1, 0.5)
        );
    }

    #[test]
    fn ensemble_rejects_empty() {
        assert!(matches!(
            ensemble_average(&[]),
            Err(MetricError::EmptyEnsemble)
        ));
    }

    #[test]
    fn tta_identity_model_returns_input_exactly() {
        let mut img = ImagePlane::zeros(4, 4, 3);
        for (i, v) in (0..48).map(|i| (i, i as f64 / 48.0)) {
            let (y, x, c) = (i / 12, (i / 3) % 4, i % 3);
            img.set(y, x, c, v);
        }
        let vox = VoxelGrid::zeros(2, 4, 4);
        let mut model =
            |i: &ImagePlane, _v: &VoxelGrid| -> Result<ImagePlane, MetricError> { Ok(i.clone()) };
        let out = tta_flip_infer(&mut model, &img, &vox).unwrap();
        assert_eq!(out, img);
    }
}
