//! Losses, optimizer, schedule, patch sampling, and the training loop.

mod config;
mod losses;
mod optim;

pub use config::{parse_config, ParsedConfig};
pub use losses::{loss_motion_edge, loss_psnr, loss_reconstruction};
pub use optim::{adamw_step, cosine_lr, OptimizerState};

use crate::autodiff::{container, AutodiffError, Tape, Tensor};
use crate::events::{
    parse_event_csv, EventError, EventStream, ImagePlane, ImageError, PnmError,
};
use crate::kunet::{
    image_to_tensor, kunet_forward, voxel_to_tensor, KUnetParams, ModelConfig, ModelError,
};
use crate::repr::{crop_events, motion_edge, transform_events, voxelize, ReprError, SpatialOp, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("dataset directory {0} has no samples")]
    EmptyDataset(String),
    #[error("patch {patch} exceeds frame size {h}x{w}")]
    PatchTooLarge { patch: usize, h: usize, w: usize },
    #[error("patch {patch} must be divisible by {factor} (2^levels)")]
    PatchIndivisible { patch: usize, factor: usize },
    #[error("sample {name}: image is {img_w}x{img_h} but events declare {ev_w}x{ev_h}")]
    SensorMismatch {
        name: String,
        img_w: usize,
        img_h: usize,
        ev_w: u32,
        ev_h: u32,
    },
    #[error("schedule step {t} exceeds total {total}")]
    ScheduleOutOfRange { t: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Pnm {
        path: String,
        #[source]
        source: PnmError,
    },
    #[error("{path}: {source}")]
    Events {
        path: String,
        #[source]
        source: EventError,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

/// Training hyperparameters. Defaults follow the documented desk-scale
/// recipe: AdamW(0.9, 0.99) with decoupled decay 1e-4, cosine annealing
/// from 2e-4 to 1e-7, patch 64, batch 8, 6x dataset enlargement, and a
/// 0.5-weighted PSNR loss plus unit L1+L2 reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch: usize,
    pub iters: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub enlarge: usize,
    pub w_psnr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub w_edge: f64,
    pub tau_edge: f64,
    pub seed: u64,
    /// Checkpoint every K iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Random flip/rotation augmentation while sampling patches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            patch: 64,
            iters: 500,
            lr_max: 2e-4,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            enlarge: 6,
            w_psnr: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            w_edge: 0.0,
            tau_edge: 0.1,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| TrainError::Config {
            line: 0,
            msg: msg.into(),
        };
        if self.batch_size == 0 || self.enlarge == 0 {
            return Err(bad("batch_size and enlarge must be >= 1"));
        }
        if self.w_psnr < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.w_edge < 0.0 {
            return Err(bad("loss weights must be non-negative"));
        }
        if self.tau_edge <= 0.0 {
            return Err(bad("tau_edge must be positive"));
        }
        Ok(())
    }
}

/// One dataset sample: blurry input, sharp target, exposure events.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub blur: ImagePlane,
    pub sharp: ImagePlane,
    pub events: EventStream,
}

/// Loads `<name>.blur.ppm` / `<name>.sharp.ppm` / `<name>.events.csv`
/// triples, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, TrainError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter_map(|n| n.strip_suffix(".blur.ppm").map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(TrainError::EmptyDataset(dir.display().to_string()));
    }
    let load_img = |path: PathBuf| -> Result<ImagePlane, TrainError> {
        let bytes = std::fs::read(&path)?;
        crate::events::load_image_pnm(&bytes).map_err(|source| TrainError::Pnm {
            path: path.display().to_string(),
            source,
        })
    };
    names
        .into_iter()
        .map(|name| {
            let blur = load_img(dir.join(format!("{name}.blur.ppm")))?;
            let sharp = load_img(dir.join(format!("{name}.sharp.ppm")))?;
            let ev_path = dir.join(format!("{name}.events.csv"));
            let text = std::fs::read_to_string(&ev_path)?;
            let events = parse_event_csv(&text).map_err(|source| TrainError::Events {
                path: ev_path.display().to_string(),
                source,
            })?;
            if events.sensor_width as usize != blur.width
                || events.sensor_height as usize != blur.height
            {
                return Err(TrainError::SensorMismatch {
                    name,
                    img_w: blur.width,
                    img_h: blur.height,
                    ev_w: events.sensor_width,
                    ev_h: events.sensor_height,
                });
            }
            Ok(Sample {
                name,
                blur,
                sharp,
                events,
            })
        })
        .collect()
}

/// Cuts an aligned random crop from the blurry image, the sharp image, and
/// the event stream, optionally augmenting with a horizontal flip (p=0.5)
/// and a uniform k*90-degree rotation, then voxelizes the cropped events.
///
/// The same crop rectangle and the same transform act on all three parts,
/// so pixel-event alignment is preserved exactly.
pub fn sample_patch(
    blur: &ImagePlane,
    sharp: &ImagePlane,
    events: &EventStream,
    patch: usize,
    bins: usize,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ImagePlane, ImagePlane, VoxelGrid), TrainError> {
    let (h, w) = (blur.height, blur.width);
    if patch == 0 || patch > h || patch > w {
        return Err(TrainError::PatchTooLarge { patch, h, w });
    }
    let y0 = rng.gen_range(0..=(h - patch)) as u32;
    let x0 = rng.gen_range(0..=(w - patch)) as u32;
    let mut b = blur.crop(y0 as usize, x0 as usize, patch);
    let mut s = sharp.crop(y0 as usize, x0 as usize, patch);
    let mut ev = crop_events(events, y0, x0, patch as u32);
    if augment {
        if rng.gen::<bool>() {
            b = b.hflip();
            s = s.hflip();
            ev = transform_events(&ev, SpatialOp::HFlip);
        }
        let k = rng.gen_range(0u8..4);
        if k > 0 {
            let op = match k {
                1 => SpatialOp::Rot90,
                2 => SpatialOp::Rot180,
                _ => SpatialOp::Rot270,
            };
            for _ in 0..k {
                b = b.rot90();
                s = s.rot90();
            }
            ev = transform_events(&ev, op);
        }
    }
    let vox = voxelize(&ev, bins)?;
    Ok((b, s, vox))
}

/// Per-slot outcome of the parallel section: loss parts plus gradients in
/// canonical parameter order.
type SlotResult = (LossParts, Vec<Vec<f64>>);

/// Scalar loss components of one forward pass (batch means when averaged).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub psnr: f64,
    pub rec: f64,
    pub edge: f64,
}

/// Builds the training objective on the tape:
/// `w_psnr * psnr + (lambda1 L1 + lambda2 L2) + w_edge * edge`.
fn build_loss(
    tape: &mut Tape,
    pred: &Tensor,
    gt: &Tensor,
    vox: &VoxelGrid,
    cfg: &TrainConfig,
) -> Result<(Tensor, LossParts), TrainError> {
    let l_psnr = loss_psnr(tape, pred, gt, cfg.w_psnr)?;
    let l_rec = loss_reconstruction(tape, pred, gt, cfg.lambda1, cfg.lambda2)?;
    let mut total = tape.add(&l_psnr, &l_rec)?;
    let mut parts = LossParts {
        psnr: l_psnr.item(),
        rec: l_rec.item(),
        edge: 0.0,
        total: 0.0,
    };
    if cfg.w_edge > 0.0 {
        let edge = motion_edge(vox, cfg.tau_edge)?;
        let l_edge = loss_motion_edge(tape, pred, &edge)?;
        let weighted = tape.scale(&l_edge, cfg.w_edge);
        parts.edge = weighted.item();
        total = tape.add(&total, &weighted)?;
    }
    parts.total = total.item();
    Ok((total, parts))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub first_loss: f64,
    pub last_loss: f64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Serializes params, config, and optimizer state into checkpoint bytes.
fn checkpoint_bytes(
    params: &KUnetParams,
    cfg: &ModelConfig,
    state: &OptimizerState,
    iter: usize,
) -> Vec<u8> {
    let mut map = params.to_map(cfg);
    for ((name, tensor), (m, v)) in params.named().iter().zip(state.moments()) {
        let shape = tensor.shape().to_vec();
        map.insert(format!("opt.m.{name}"), Tensor::new(shape.clone(), m.to_vec()));
        map.insert(format!("opt.v.{name}"), Tensor::new(shape, v.to_vec()));
    }
    map.insert("opt.step".into(), Tensor::scalar(state.step() as f64));
    map.insert("meta.iter".into(), Tensor::scalar(iter as f64));
    container::save_tensors(&map).expect("checkpoint names are valid")
}

/// Runs the full training loop; deterministic under `train_cfg.seed`.
///
/// Writes `metrics.csv` (header `iter,loss,loss_psnr,loss_rec,loss_edge,
/// lr,seconds`) and `checkpoint.kunt` into `out_dir`, plus intermediate
/// `checkpoint_<iter>.kunt` files every `checkpoint_every` iterations.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if !train_cfg.patch.is_multiple_of(model_cfg.spatial_factor()) {
        return Err(TrainError::PatchIndivisible {
            patch: train_cfg.patch,
            factor: model_cfg.spatial_factor(),
        });
    }
    let samples = load_dataset(dataset_dir)?;
    for s in &samples {
        if train_cfg.patch > s.blur.height.min(s.blur.width) {
            return Err(TrainError::PatchTooLarge {
                patch: train_cfg.patch,
                h: s.blur.height,
                w: s.blur.width,
            });
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut params = KUnetParams::init(model_cfg, train_cfg.seed)?;
    let mut state = OptimizerState::for_params(&params.named());
    let start = Instant::now();
    let mut log = String::from("iter,loss,loss_psnr,loss_rec,loss_edge,lr,seconds\n");
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;

    // Visiting order: each sample appears `enlarge` times per virtual
    // epoch, shuffled; fresh crops come from the per-slot streams below.
    let epoch_len = samples.len() * train_cfg.enlarge;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0usize;

    for iter in 0..train_cfg.iters {
        let lr = cosine_lr(iter, train_cfg.iters, train_cfg.lr_max, train_cfg.lr_min)?;

        let mut batch = Vec::with_capacity(train_cfg.batch_size);
        for slot in 0..train_cfg.batch_size {
            if cursor == order.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
                rng.set_stream(EPOCH_STREAM_BASE + epoch);
                order = (0..epoch_len).map(|i| i % samples.len()).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
            rng.set_stream((iter * train_cfg.batch_size + slot) as u64);
            let (b, s, vox) = sample_patch(
                &sample.blur,
                &sample.sharp,
                &sample.events,
                train_cfg.patch,
                model_cfg.event_bins,
                train_cfg.augment,
                &mut rng,
            )?;
            batch.push((image_to_tensor(&b), image_to_tensor(&s), vox));
        }

        // One tape per sample; gradients are reduced in slot order, so the
        // result is independent of scheduling.
        let results: Vec<Result<SlotResult, TrainError>> = batch
            .par_iter()
            .map(|(img, gt, vox)| {
                let mut tape = Tape::new();
                let (bound, ids) = params.bind(&mut tape);
                let vox_t = voxel_to_tensor(vox);
                let pred = kunet_forward(&mut tape, &bound, model_cfg, img, &vox_t)?;
                let (total, parts) = build_loss(&mut tape, &pred, gt, vox, train_cfg)?;
                let mut grads = tape.backward(&total)?;
                let named = bound.named();
                let gvecs: Vec<Vec<f64>> = ids
                    .iter()
                    .zip(named.iter())
                    .map(|(&id, (_, t))| {
                        grads.take(id).unwrap_or_else(|| vec![0.0; t.numel()])
                    })
                    .collect();
                Ok((parts, gvecs))
            })
            .collect();

        let mut mean_parts = LossParts::default();
        let mut mean_grads: Option<Vec<Vec<f64>>> = None;
        let inv_b = 1.0 / train_cfg.batch_size as f64;
        for r in results {
            let (parts, gvecs) = r?;
            mean_parts.total += parts.total * inv_b;
            mean_parts.psnr += parts.psnr * inv_b;
            mean_parts.rec += parts.rec * inv_b;
            mean_parts.edge += parts.edge * inv_b;
            match &mut mean_grads {
                None => {
                    let mut g = gvecs;
                    for v in &mut g {
                        for x in v.iter_mut() {
                            *x *= inv_b;
                        }
                    }
                    mean_grads = Some(g);
                }
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gvecs) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y * inv_b;
                        }
                    }
                }
            }
        }
        let grads = mean_grads.expect("batch_size >= 1");

        adamw_step(
            &mut params,
            &grads,
            &mut state,
            lr,
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.weight_decay,
        );

        if iter == 0 {
            first_loss = mean_parts.total;
        }
        last_loss = mean_parts.total;
        log.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9e},{:.3}\n",
            iter + 1,
            mean_parts.total,
            mean_parts.psnr,
            mean_parts.rec,
            mean_parts.edge,
            lr,
            start.elapsed().as_secs_f64(),
        ));

        if train_cfg.checkpoint_every > 0 && (iter + 1) % train_cfg.checkpoint_every == 0 {
            let bytes = checkpoint_bytes(&params, model_cfg, &state, iter + 1);
            std::fs::write(out_dir.join(format!("checkpoint_{:06}.kunt", iter + 1)), bytes)?;
        }
    }

    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, log)?;
    let checkpoint_path = out_dir.join("checkpoint.kunt");
    std::fs::write(
        &checkpoint_path,
        checkpoint_bytes(&params, model_cfg, &state, train_cfg.iters),
    )?;
    Ok(TrainReport {
        first_loss,
        last_loss,
        checkpoint_path,
        metrics_path,
    })
}

/// Stream-id namespace for per-epoch shuffles, far above any per-slot id.
const EPOCH_STREAM_BASE: u64 = 1 << 40;
