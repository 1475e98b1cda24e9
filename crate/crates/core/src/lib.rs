//! Event-based single-image motion deblurring toolkit.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! * [`events`] — event streams, image planes, and their on-disk formats
//!   (event CSV, binary PGM/PPM).
//! * [`repr`] — tensor representations of event streams: bilinear voxel
//!   grids, symmetric cumulative representations, multi-window and split
//!   voxels, and motion-edge maps.
//! * [`autodiff`] — a dense tensor engine with reverse-mode automatic
//!   differentiation and the `KUNT` named-tensor container format.
//! * [`kan`] — B-spline basis machinery and spline-augmented linear layers.
//! * [`kunet`] — the dual-encoder U-Net with bottleneck fusion and a
//!   spline-attention transformer block.
//! * [`training`] — losses, AdamW, cosine schedule, patch sampling, and the
//!   training loop.
//! * [`synth`] — a contrast-threshold event simulator that generates paired
//!   (sharp, blurry, events) fixtures.
//! * [`metrics`] — PSNR/SSIM scoring, directory evaluation, ensembling, and
//!   test-time flip augmentation.
//! * [`gradcheck`] — finite-difference oracles used by the verification
//!   suites.

pub mod autodiff;
pub mod events;
pub mod gradcheck;
pub mod kan;
pub mod kunet;
pub mod metrics;
pub mod repr;
pub mod synth;
pub mod training;
