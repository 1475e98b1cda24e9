//! Synthetic (sharp, blurry, events) fixture generation.
//!
//! A scene is a deterministic base pattern translated at constant velocity
//! across `frames` dense subframes with bilinear sampling and wraparound.
//! The blurry image is the exposure average, the sharp ground truth is the
//! middle subframe, and events come from a contrast-threshold model on
//! per-pixel log intensity.

use crate::events::{
    save_image_pnm, write_event_csv, Event, EventError, EventStream, ImagePlane,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("timestamps must be strictly increasing and match the frame count")]
    BadTimestamps,
    #[error("no frames to integrate")]
    NoFrames,
    #[error("contrast threshold must be positive, got {0}")]
    BadContrast(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Event(#[from] EventError),
}

/// Base pattern families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Checker,
    Gradient,
    TexturedNoise,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pattern::Checker => "checker",
            Pattern::Gradient => "gradient",
            Pattern::TexturedNoise => "textured-noise",
        };
        f.write_str(s)
    }
}

/// A moving synthetic scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub pattern: Pattern,
    /// Pixels per subframe.
    pub velocity: (f64, f64),
    /// Number of dense subframes (>= 2).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Contrast-threshold event model on log intensity.
#[derive(Debug, Clone, Copy)]
pub struct EventModel {
    /// Log-intensity step per event.
    pub contrast: f64,
    /// Additive floor inside the logarithm.
    pub log_floor: f64,
}

impl Default for EventModel {
    fn default() -> Self {
        Self {
            contrast: 0.2,
            log_floor: 1e-3,
        }
    }
}

fn render_base(scene: &Scene) -> ImagePlane {
    let (h, w) = (scene.height, scene.width);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut img = ImagePlane::zeros(h, w, 3);
    match scene.pattern {
        Pattern::Checker => {
            let tile = 8.max(h.min(w) / 8);
            // Separated luminance bands keep the log-intensity step across
            // tile edges above typical contrast thresholds, so motion over
            // the checker always emits events.
            let lumas = [rng.gen_range(0.15..0.35), rng.gen_range(0.6..0.85)];
            let mut colors = [[0.0; 3]; 2];
            for (color, luma) in colors.iter_mut().zip(lumas) {
                for ch in color.iter_mut() {
                    *ch = (luma + rng.gen_range(-0.08..0.08f64)).clamp(0.05, 0.95);
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let c = colors[((x / tile) + (y / tile)) % 2];
                    for (ch, &v) in c.iter().enumerate() {
                        img.set(y, x, ch, v);
                    }
                }
            }
        }
        Pattern::Gradient => {
            // One random linear ramp per channel; the wrap seam acts as a
            // strong moving edge.
            for ch in 0..3 {
                let gx: f64 = rng.gen_range(-1.0..1.0);
                let gy: f64 = rng.gen_range(-1.0..1.0);
                let span = gx.abs() + gy.abs() + 1e-9;
                for y in 0..h {
                    for x in 0..w {
                        let t = (gx * x as f64 / w as f64 + gy * y as f64 / h as f64) / span;
                        img.set(y, x, ch, 0.1 + 0.8 * (t + 0.5).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Pattern::TexturedNoise => {
            let mut noise = vec![0.0; h * w * 3];
            for v in &mut noise {
                *v = rng.gen_range(0.0..1.0);
            }
            // Two wrap-around box blurs tame the highest frequencies so
            // subpixel translation stays meaningful.
            for _ in 0..2 {
                let mut next = noise.clone();
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..3 {
                            let mut acc = 0.0;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let yy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                                    let xx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                                    acc += noise[(yy * w + xx) * 3 + ch];
                                }
                            }
                            next[(y * w + x) * 3 + ch] = acc / 9.0;
                        }
                    }
                }
                noise = next;
            }
            let lo = noise.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = noise.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-9);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = (noise[(y * w + x) * 3 + ch] - lo) / span;
                        img.set(y, x, ch, 0.1 + 0.8 * v);
                    }
                }
            }
        }
    }
    img
}

/// Samples `base` at a translated position with bilinear interpolation and
/// wraparound.
fn sample_shifted(base: &ImagePlane, y: f64, x: f64, ch: usize) -> f64 {
    let (h, w) = (base.height as f64, base.width as f64);
    let xw = x.rem_euclid(w);
    let yw = y.rem_euclid(h);
    let x0 = xw.floor();
    let y0 = yw.floor();
    let fx = xw - x0;
    let fy = yw - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1) % base.width;
    let y1 = (y0 + 1) % base.height;
    let v00 = base.get(y0, x0, ch);
    let v01 = base.get(y0, x1, ch);
    let v10 = base.get(y1, x0, ch);
    let v11 = base.get(y1, x1, ch);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Renders the scene's dense subframe sequence.
pub fn render_sequence(scene: &Scene) -> Result<Vec<ImagePlane>, SynthError> {
    if scene.frames < 2 {
        return Err(SynthError::TooFewFrames(scene.frames));
    }
    let base = render_base(scene);
    let (vx, vy) = scene.velocity;
    let mut frames = Vec::with_capacity(scene.frames);
    for k in 0..scene.frames {
        let (dx, dy) = (k as f64 * vx, k as f64 * vy);
        let mut frame = ImagePlane::zeros(scene.height, scene.width, 3);
        for y in 0..scene.height {
            for x in 0..scene.width {
                for ch in 0..3 {
                    let v = sample_shifted(&base, y as f64 - dy, x as f64 - dx, ch);
                    frame.set(y, x, ch, v);
                }
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Exposure blur: the per-pixel arithmetic mean of the subframes.
///
/// Computed as `first + mean(frame - first)`, which is exact when the
/// scene is static (blur == sharp bit-for-bit) and well conditioned
/// otherwise.
pub fn integrate_blur(frames: &[ImagePlane]) -> Result<ImagePlane, SynthError> {
    let first = frames.first().ok_or(SynthError::NoFrames)?;
    let mut dev = vec![0.0; first.data().len()];
    for f in &frames[1..] {
        for ((acc, &v), &v0) in dev.iter_mut().zip(f.data()).zip(first.data()) {
            *acc += v - v0;
        }
    }
    let n = frames.len() as f64;
    let data: Vec<f64> = first
        .data()
        .iter()
        .zip(&dev)
        .map(|(&v0, &d)| (v0 + d / n).clamp(0.0, 1.0))
        .collect();
    Ok(ImagePlane::new(first.height, first.width, first.channels, data)
        .expect("means of in-range values are in range"))
}

/// Emits events wherever per-pixel log intensity crosses multiples of the
/// contrast threshold, with linearly interpolated timestamps.
///
/// Intensity is the luminance `(R+G+B)/3`; the tracked signal is
/// `ln(I + log_floor)`. The per-pixel reference advances by one threshold
/// step per emitted event.
pub fn generate_events(
    frames: &[ImagePlane],
    model: &EventModel,
    timestamps: &[u64],
) -> Result<EventStream, SynthError> {
    if frames.len() < 2 {
        return Err(SynthError::TooFewFrames(frames.len()));
    }
    if timestamps.len() != frames.len() || timestamps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SynthError::BadTimestamps);
    }
    if model.contrast <= 0.0 {
        return Err(SynthError::BadContrast(model.contrast));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    let log_frames: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            f.luma()
                .data()
                .iter()
                .map(|&v| (v + model.log_floor).ln())
                .collect()
        })
        .collect();
    let c = model.contrast;
    let mut events = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut l_ref = log_frames[0][idx];
            for i in 0..frames.len() - 1 {
                let l_cur = log_frames[i][idx];
                let l_next = log_frames[i + 1][idx];
                let diff = l_next - l_ref;
                let n = (diff.abs() / c).floor() as usize;
                if n == 0 {
                    continue;
                }
                let sign = diff.signum();
                let p: i8 = if sign > 0.0 { 1 } else { -1 };
                let (t0, t1) = (timestamps[i] as f64, timestamps[i + 1] as f64);
                let slope = l_next - l_cur;
                for k in 1..=n {
                    let threshold = l_ref + sign * c * k as f64;
                    let frac = if slope != 0.0 {
                        ((threshold - l_cur) / slope).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    let t = (t0 + frac * (t1 - t0)).round() as u64;
                    events.push(Event {
                        t: t.clamp(timestamps[i], timestamps[i + 1]),
                        x: x as u32,
                        y: y as u32,
                        p,
                    });
                }
                l_ref += sign * c * n as f64;
            }
        }
    }
    Ok(EventStream::from_unsorted(
        events,
        w as u32,
        h as u32,
        timestamps[0],
        *timestamps.last().unwrap(),
    )?)
}

/// Default scene geometry for generated datasets.
pub const SCENE_SIZE: usize = 64;
pub const SCENE_FRAMES: usize = 17;
pub const SCENE_EXPOSURE_US: u64 = 16_000;

/// Everything produced for one scene.
pub struct SceneTriple {
    pub scene: Scene,
    pub blur: ImagePlane,
    pub sharp: ImagePlane,
    pub events: EventStream,
}

/// Builds the triple for one scene under the given event model.
pub fn build_scene(scene: &Scene, model: &EventModel) -> Result<SceneTriple, SynthError> {
    let frames = render_sequence(scene)?;
    let blur = integrate_blur(&frames)?;
    // The latent sharp image sits at the exposure center.
    let sharp = frames[scene.frames / 2].clone();
    let step = SCENE_EXPOSURE_US / (scene.frames as u64 - 1);
    let timestamps: Vec<u64> = (0..scene.frames as u64).map(|k| k * step).collect();
    let events = generate_events(&frames, model, &timestamps)?;
    Ok(SceneTriple {
        scene: scene.clone(),
        blur,
        sharp,
        events,
    })
}

/// Generates `n_scenes` triples plus a manifest CSV, deterministically
/// under `seed`. Returns the manifest path.
pub fn make_dataset(
    n_scenes: usize,
    out_dir: &Path,
    seed: u64,
    model: &EventModel,
) -> Result<PathBuf, SynthError> {
    if model.contrast <= 0.0 {
        return Err(SynthError::BadContrast(model.contrast));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::from("name,pattern,vx,vy,frames,C,seed\n");
    for i in 0..n_scenes {
        let pattern = [Pattern::Checker, Pattern::Gradient, Pattern::TexturedNoise][i % 3];
        let magnitude: f64 = rng.gen_range(0.25..0.55);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let scene = Scene {
            pattern,
            velocity: (magnitude * angle.cos(), magnitude * angle.sin()),
            frames: SCENE_FRAMES,
            height: SCENE_SIZE,
            width: SCENE_SIZE,
            seed: rng.gen(),
        };
        let name = format!("scene_{i:03}");
        let triple = build_scene(&scene, model)?;
        std::fs::write(
            out_dir.join(format!("{name}.blur.ppm")),
            save_image_pnm(&triple.blur),
        )?;
        std::fs::write(
            out_dir.join(format!("{name}.sharp.ppm")),
            save_image_pnm(&triple.sharp),
        )?;
        std::fs::write(
            out_dir.join(format!("{name}.events.csv")),
            write_event_csv(&triple.events),
        )?;
        manifest.push_str(&format!(
            "{name},{},{:.6},{:.6},{},{:.6},{}\n",
            scene.pattern,
            scene.velocity.0,
            scene.velocity.1,
            scene.frames,
            model.contrast,
            scene.seed
        ));
    }
    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}
