//! Dual-encoder U-Net with bottleneck fusion and a spline-attention
//! transformer block.
//!
//! The image and event branches run identical conv ladders (two 3x3 convs
//! with silu, then a stride-2 downsample per level). Their bottleneck
//! features are concatenated channel-wise, projected to the token width by
//! a 1x1 conv, and refined by a pre-norm transformer block whose linear
//! projections are spline layers. The decoder upsamples with nearest
//! neighbor, concatenating image-branch skips. The head conv starts at
//! zero, so a fresh network is the identity on the image input.

use crate::autodiff::{container, AutodiffError, Tape, Tensor};
use crate::kan::{kan_forward, KanError, KanLayerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Layer-norm variance floor used throughout the transformer block.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Kan(#[from] KanError),
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint meta is malformed: {0}")]
    BadMeta(String),
}

/// Architecture hyperparameters.
///
/// Level `l` uses `base_channels << l` feature channels; each branch ends
/// with `base_channels << levels` channels before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub event_bins: usize,
    pub heads: usize,
    pub token_dim: usize,
    /// Spline grid intervals (G).
    pub kan_grid: usize,
    /// Spline degree (p).
    pub kan_degree: usize,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(16)
    }
}

impl ModelConfig {
    /// Desk-scale config family: token width tracks the channel budget.
    pub fn desk(base_channels: usize) -> Self {
        Self {
            base_channels,
            levels: 3,
            event_bins: 6,
            heads: 4,
            token_dim: 4 * base_channels,
            kan_grid: 8,
            kan_degree: 3,
            image_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels == 0 {
            return Err(ModelError::BadConfig("levels must be >= 1".into()));
        }
        if self.event_bins == 0 {
            return Err(ModelError::BadConfig("event_bins must be >= 1".into()));
        }
        if self.base_channels == 0 || self.token_dim == 0 {
            return Err(ModelError::BadConfig("channel widths must be positive".into()));
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return Err(ModelError::BadConfig(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(ModelError::BadConfig("image_channels must be 1 or 3".into()));
        }
        Ok(())
    }

    /// Feature width at encoder level `l`.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Per-branch width after the last downsample.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.levels
    }

    /// Spatial divisibility required of network inputs.
    pub fn spatial_factor(&self) -> usize {
        1 << self.levels
    }

    /// Encodes the integer fields as the checkpoint's `meta.config` tensor,
    /// in this documented order: base_channels, levels, event_bins, heads,
    /// token_dim, kan_grid, kan_degree, image_channels.
    pub fn to_meta_tensor(&self) -> Tensor {
        Tensor::new(
            vec![8],
            vec![
                self.base_channels as f64,
                self.levels as f64,
                self.event_bins as f64,
                self.heads as f64,
                self.token_dim as f64,
                self.kan_grid as f64,
                self.kan_degree as f64,
                self.image_channels as f64,
            ],
        )
    }

    pub fn from_meta_tensor(meta: &Tensor) -> Result<Self, ModelError> {
        let d = meta.data();
        if d.len() != 8 {
            return Err(ModelError::BadMeta(format!(
                "meta.config must have 8 entries, got {}",
                d.len()
            )));
        }
        let cfg = Self {
            base_channels: d[0] as usize,
            levels: d[1] as usize,
            event_bins: d[2] as usize,
            heads: d[3] as usize,
            token_dim: d[4] as usize,
            kan_grid: d[5] as usize,
            kan_degree: d[6] as usize,
            image_channels: d[7] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A conv weight with its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let w: Vec<f64> = (0..c_out * c_in * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            w: Tensor::new(vec![c_out, c_in, k, k], w),
            b: Tensor::new(vec![c_out], b),
        }
    }

    fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![c_out, c_in, k, k]),
            b: Tensor::zeros(vec![c_out]),
        }
    }
}

/// One encoder level: two same-size convs plus a stride-2 downsample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLevel {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub down: ConvParams,
}

/// One decoder stage: runs after upsampling and skip concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
        }
    }
}

/// Transformer block parameters: pre-norm attention with spline-layer
/// projections, then a pre-norm spline feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub norm1: NormParams,
    pub q: KanLayerParams,
    pub k: KanLayerParams,
    pub v: KanLayerParams,
    pub out: KanLayerParams,
    pub norm2: NormParams,
    pub ff1: KanLayerParams,
    pub ff2: KanLayerParams,
}

/// All learnable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct KUnetParams {
    pub img_enc: Vec<EncoderLevel>,
    pub ev_enc: Vec<EncoderLevel>,
    pub fuse: ConvParams,
    pub attn: AttentionParams,
    pub dec: Vec<DecoderLevel>,
    pub head: ConvParams,
}

impl KUnetParams {
    /// Seeded initialization. The head conv starts at zero so the global
    /// residual makes a fresh network the identity on the image input.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = |rng: &mut ChaCha8Rng, in_ch: usize| -> Vec<EncoderLevel> {
            (0..cfg.levels)
                .map(|l| {
                    let c = cfg.channels_at(l);
                    let c_in = if l == 0 { in_ch } else { c };
                    EncoderLevel {
                        conv1: ConvParams::init(rng, c_in, c, 3),
                        conv2: ConvParams::init(rng, c, c, 3),
                        down: ConvParams::init(rng, c, cfg.channels_at(l + 1), 2),
                    }
                })
                .collect()
        };
        let img_enc = enc(&mut rng, cfg.image_channels);
        let ev_enc = enc(&mut rng, cfg.event_bins);
        let fuse = ConvParams::init(&mut rng, 2 * cfg.bottleneck_channels(), cfg.token_dim, 1);
        let d = cfg.token_dim;
        let (g, p) = (cfg.kan_grid, cfg.kan_degree);
        let kan = |rng: &mut ChaCha8Rng, i: usize, o: usize| -> Result<KanLayerParams, KanError> {
            KanLayerParams::init(i, o, g, p, rng.gen::<u64>())
        };
        let attn = AttentionParams {
            norm1: NormParams::identity(d),
            q: kan(&mut rng, d, d)?,
            k: kan(&mut rng, d, d)?,
            v: kan(&mut rng, d, d)?,
            out: kan(&mut rng, d, d)?,
            norm2: NormParams::identity(d),
            ff1: kan(&mut rng, d, 2 * d)?,
            ff2: kan(&mut rng, 2 * d, d)?,
        };
        let dec = (0..cfg.levels)
            .map(|i| {
                let level = cfg.levels - 1 - i;
                let c_skip = cfg.channels_at(level);
                let c_in_stage = if i == 0 { cfg.token_dim } else { cfg.channels_at(level + 1) };
                DecoderLevel {
                    conv1: ConvParams::init(&mut rng, c_in_stage + c_skip, c_skip, 3),
                    conv2: ConvParams::init(&mut rng, c_skip, c_skip, 3),
                }
            })
            .collect();
        let head = ConvParams::zeros(cfg.channels_at(0), cfg.image_channels, 3);
        Ok(Self {
            img_enc,
            ev_enc,
            fuse,
            attn,
            dec,
            head,
        })
    }

    /// Trainable tensors with canonical names, in a fixed traversal order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let conv = |prefix: String, c: &ConvParams, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{prefix}.w"), c.w.clone()));
            out.push((format!("{prefix}.b"), c.b.clone()));
        };
        for (branch, levels) in [("img_enc", &self.img_enc), ("ev_enc", &self.ev_enc)] {
            for (l, level) in levels.iter().enumerate() {
                conv(format!("{branch}.{l}.conv1"), &level.conv1, &mut out);
                conv(format!("{branch}.{l}.conv2"), &level.conv2, &mut out);
                conv(format!("{branch}.{l}.down"), &level.down, &mut out);
            }
        }
        conv("fuse".to_string(), &self.fuse, &mut out);
        out.push(("attn.norm1.gamma".into(), self.attn.norm1.gamma.clone()));
        out.push(("attn.norm1.beta".into(), self.attn.norm1.beta.clone()));
        for (name, layer) in self.kan_layers() {
            out.push((format!("{name}.W_base"), layer.w_base.clone()));
            out.push((format!("{name}.W_spline"), layer.w_spline.clone()));
        }
        out.push(("attn.norm2.gamma".into(), self.attn.norm2.gamma.clone()));
        out.push(("attn.norm2.beta".into(), self.attn.norm2.beta.clone()));
        for (i, stage) in self.dec.iter().enumerate() {
            conv(format!("dec.{i}.conv1"), &stage.conv1, &mut out);
            conv(format!("dec.{i}.conv2"), &stage.conv2, &mut out);
        }
        conv("head".to_string(), &self.head, &mut out);
        out
    }

    fn kan_layers(&self) -> Vec<(&'static str, &KanLayerParams)> {
        vec![
            ("attn.q", &self.attn.q),
            ("attn.k", &self.attn.k),
            ("attn.v", &self.attn.v),
            ("attn.out", &self.attn.out),
            ("attn.ff1", &self.attn.ff1),
            ("attn.ff2", &self.attn.ff2),
        ]
    }

    /// Applies `f` to every trainable tensor, preserving structure. The
    /// traversal order matches [`KUnetParams::named`].
    pub fn map_tensors(&self, f: &mut impl FnMut(&Tensor) -> Tensor) -> Self {
        let map_conv = |c: &ConvParams, f: &mut dyn FnMut(&Tensor) -> Tensor| ConvParams {
            w: f(&c.w),
            b: f(&c.b),
        };
        let map_enc = |levels: &[EncoderLevel], f: &mut dyn FnMut(&Tensor) -> Tensor| {
            levels
                .iter()
                .map(|l| EncoderLevel {
                    conv1: map_conv(&l.conv1, f),
                    conv2: map_conv(&l.conv2, f),
                    down: map_conv(&l.down, f),
                })
                .collect::<Vec<_>>()
        };
        let img_enc = map_enc(&self.img_enc, f);
        let ev_enc = map_enc(&self.ev_enc, f);
        let fuse = map_conv(&self.fuse, f);
        let norm1 = NormParams {
            gamma: f(&self.attn.norm1.gamma),
            beta: f(&self.attn.norm1.beta),
        };
        let map_kan = |k: &KanLayerParams, f: &mut dyn FnMut(&Tensor) -> Tensor| KanLayerParams {
            in_dim: k.in_dim,
            out_dim: k.out_dim,
            w_base: f(&k.w_base),
            w_spline: f(&k.w_spline),
            grid: k.grid.clone(),
        };
        let q = map_kan(&self.attn.q, f);
        let k = map_kan(&self.attn.k, f);
        let v = map_kan(&self.attn.v, f);
        let out = map_kan(&self.attn.out, f);
        let ff1 = map_kan(&self.attn.ff1, f);
        let ff2 = map_kan(&self.attn.ff2, f);
        let norm2 = NormParams {
            gamma: f(&self.attn.norm2.gamma),
            beta: f(&self.attn.norm2.beta),
        };
        let dec = self
            .dec
            .iter()
            .map(|s| DecoderLevel {
                conv1: map_conv(&s.conv1, f),
                conv2: map_conv(&s.conv2, f),
            })
            .collect();
        let head = map_conv(&self.head, f);
        Self {
            img_enc,
            ev_enc,
            fuse,
            attn: AttentionParams {
                norm1,
                q,
                k,
                v,
                out,
                norm2,
                ff1,
                ff2,
            },
            dec,
            head,
        }
    }

    /// Visits every trainable tensor mutably, in [`KUnetParams::named`]
    /// order. Used by the optimizer to apply updates in place.
    pub fn update_tensors(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        let conv = |c: &mut ConvParams, f: &mut dyn FnMut(&mut Tensor)| {
            f(&mut c.w);
            f(&mut c.b);
        };
        for levels in [&mut self.img_enc, &mut self.ev_enc] {
            for level in levels.iter_mut() {
                conv(&mut level.conv1, f);
                conv(&mut level.conv2, f);
                conv(&mut level.down, f);
            }
        }
        conv(&mut self.fuse, f);
        f(&mut self.attn.norm1.gamma);
        f(&mut self.attn.norm1.beta);
        for layer in [
            &mut self.attn.q,
            &mut self.attn.k,
            &mut self.attn.v,
            &mut self.attn.out,
            &mut self.attn.ff1,
            &mut self.attn.ff2,
        ] {
            f(&mut layer.w_base);
            f(&mut layer.w_spline);
        }
        f(&mut self.attn.norm2.gamma);
        f(&mut self.attn.norm2.beta);
        for stage in self.dec.iter_mut() {
            conv(&mut stage.conv1, f);
            conv(&mut stage.conv2, f);
        }
        conv(&mut self.head, f);
    }

    /// Registers every trainable tensor as a tape leaf, returning the bound
    /// copy and the leaf node ids in [`KUnetParams::named`] order.
    pub fn bind(&self, tape: &mut Tape) -> (Self, Vec<usize>) {
        let mut ids = Vec::new();
        let bound = self.map_tensors(&mut |t| {
            let leafed = tape.leaf(t);
            ids.push(leafed.node().expect("recording tape"));
            leafed
        });
        (bound, ids)
    }

    /// Exact number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checkpoint content: every trainable tensor, each spline layer's grid
    /// meta, and the encoded model config.
    pub fn to_map(&self, cfg: &ModelConfig) -> BTreeMap<String, Tensor> {
        let mut map: BTreeMap<String, Tensor> = self.named().into_iter().collect();
        for (name, layer) in self.kan_layers() {
            map.insert(format!("{name}.grid_meta"), layer.grid_meta());
        }
        map.insert("meta.config".into(), cfg.to_meta_tensor());
        map
    }

    /// Rebuilds params and config from a checkpoint map; extra entries
    /// (e.g. optimizer state) are ignored.
    pub fn from_map(map: &BTreeMap<String, Tensor>) -> Result<(Self, ModelConfig), ModelError> {
        let meta = map
            .get("meta.config")
            .ok_or_else(|| ModelError::MissingTensor("meta.config".into()))?;
        let cfg = ModelConfig::from_meta_tensor(meta)?;
        let get = |name: String| -> Result<Tensor, ModelError> {
            map.get(&name)
                .cloned()
                .ok_or(ModelError::MissingTensor(name))
        };
        let conv = |prefix: String| -> Result<ConvParams, ModelError> {
            Ok(ConvParams {
                w: get(format!("{prefix}.w"))?,
                b: get(format!("{prefix}.b"))?,
            })
        };
        let enc = |branch: &str| -> Result<Vec<EncoderLevel>, ModelError> {
            (0..cfg.levels)
                .map(|l| {
                    Ok(EncoderLevel {
                        conv1: conv(format!("{branch}.{l}.conv1"))?,
                        conv2: conv(format!("{branch}.{l}.conv2"))?,
                        down: conv(format!("{branch}.{l}.down"))?,
                    })
                })
                .collect()
        };
        let kan = |name: &str| -> Result<KanLayerParams, ModelError> {
            Ok(KanLayerParams::from_tensors(
                get(format!("{name}.W_base"))?,
                get(format!("{name}.W_spline"))?,
                &get(format!("{name}.grid_meta"))?,
            )?)
        };
        let params = Self {
            img_enc: enc("img_enc")?,
            ev_enc: enc("ev_enc")?,
            fuse: conv("fuse".into())?,
            attn: AttentionParams {
                norm1: NormParams {
                    gamma: get("attn.norm1.gamma".into())?,
                    beta: get("attn.norm1.beta".into())?,
                },
                q: kan("attn.q")?,
                k: kan("attn.k")?,
                v: kan("attn.v")?,
                out: kan("attn.out")?,
                norm2: NormParams {
                    gamma: get("attn.norm2.gamma".into())?,
                    beta: get("attn.norm2.beta".into())?,
                },
                ff1: kan("attn.ff1")?,
                ff2: kan("attn.ff2")?,
            },
            dec: (0..cfg.levels)
                .map(|i| {
                    Ok(DecoderLevel {
                        conv1: conv(format!("dec.{i}.conv1"))?,
                        conv2: conv(format!("dec.{i}.conv2"))?,
                    })
                })
                .collect::<Result<_, ModelError>>()?,
            head: conv("head".into())?,
        };
        Ok((params, cfg))
    }

    /// Serializes params + config into `KUNT` bytes.
    pub fn save_checkpoint(&self, cfg: &ModelConfig) -> Vec<u8> {
        container::save_tensors(&self.to_map(cfg)).expect("canonical names are valid")
    }

    /// Loads params + config from `KUNT` bytes.
    pub fn load_checkpoint(bytes: &[u8]) -> Result<(Self, ModelConfig), ModelError> {
        let map = container::load_tensors(bytes)
            .map_err(|e| ModelError::BadMeta(e.to_string()))?;
        Self::from_map(&map)
    }
}

/// Interleaved `[0,1]` image to a planar `[C,H,W]` tensor.
pub fn image_to_tensor(img: &crate::events::ImagePlane) -> Tensor {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = img.get(y, x, ch);
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Planar `[C,H,W]` tensor back to an image, clamping into `[0,1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<crate::events::ImagePlane, ModelError> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(ModelError::BadInput(format!(
            "expected [1|3,H,W] tensor, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut img = crate::events::ImagePlane::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                img.set(y, x, ch, t.data()[(ch * h + y) * w + x].clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// Voxel grid to a `[B,H,W]` tensor (both are already planar row-major).
pub fn voxel_to_tensor(grid: &crate::repr::VoxelGrid) -> Tensor {
    Tensor::new(
        vec![grid.bins, grid.height, grid.width],
        grid.data().to_vec(),
    )
}

fn conv_block(
    tape: &mut Tape,
    x: &Tensor,
    c1: &ConvParams,
    c2: &ConvParams,
) -> Result<Tensor, AutodiffError> {
    let h = tape.conv2d(x, &c1.w, Some(&c1.b), 1, 1)?;
    let h = tape.silu(&h);
    let h = tape.conv2d(&h, &c2.w, Some(&c2.b), 1, 1)?;
    Ok(tape.silu(&h))
}

fn encode(
    tape: &mut Tape,
    levels: &[EncoderLevel],
    input: &Tensor,
) -> Result<(Tensor, Vec<Tensor>), AutodiffError> {
    let mut x = input.clone();
    let mut skips = Vec::with_capacity(levels.len());
    for level in levels {
        let f = conv_block(tape, &x, &level.conv1, &level.conv2)?;
        skips.push(f.clone());
        x = tape.conv2d(&f, &level.down.w, Some(&level.down.b), 2, 0)?;
    }
    Ok((x, skips))
}

/// Pre-norm multi-head attention with spline projections, then a pre-norm
/// spline feed-forward; both sublayers are residual. Tokens carry no
/// positional encoding, so the block is permutation-equivariant.
pub fn attention_block(
    tape: &mut Tape,
    tokens: &Tensor,
    params: &AttentionParams,
    heads: usize,
) -> Result<Tensor, ModelError> {
    let d = tokens
        .shape()
        .get(1)
        .copied()
        .ok_or_else(|| ModelError::BadInput("tokens must be [T, d]".into()))?;
    if d % heads != 0 {
        return Err(ModelError::BadInput(format!(
            "token dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let h = tape.layer_norm(tokens, &params.norm1.gamma, &params.norm1.beta, LN_EPS)?;
    let q = kan_forward(tape, &h, &params.q)?;
    let k = kan_forward(tape, &h, &params.k)?;
    let v = kan_forward(tape, &h, &params.v)?;
    let mut merged: Option<Tensor> = None;
    for head in 0..heads {
        let qs = tape.slice_cols(&q, head * dh, dh)?;
        let ks = tape.slice_cols(&k, head * dh, dh)?;
        let vs = tape.slice_cols(&v, head * dh, dh)?;
        let kt = tape.transpose(&ks)?;
        let logits = tape.matmul(&qs, &kt)?;
        let logits = tape.scale(&logits, scale);
        let weights = tape.softmax_rows(&logits)?;
        let ctx = tape.matmul(&weights, &vs)?;
        merged = Some(match merged {
            None => ctx,
            Some(acc) => tape.concat_cols(&acc, &ctx)?,
        });
    }
    let ctx = merged.expect("heads >= 1");
    let projected = kan_forward(tape, &ctx, &params.out)?;
    let x2 = tape.add(tokens, &projected)?;

    let h2 = tape.layer_norm(&x2, &params.norm2.gamma, &params.norm2.beta, LN_EPS)?;
    let f = kan_forward(tape, &h2, &params.ff1)?;
    let f = tape.silu(&f);
    let f = kan_forward(tape, &f, &params.ff2)?;
    Ok(tape.add(&x2, &f)?)
}

/// Full network forward pass: `[3,H,W]` image + `[B,H,W]` voxels to a
/// `[3,H,W]` restored image (global residual on the image input).
pub fn kunet_forward(
    tape: &mut Tape,
    params: &KUnetParams,
    cfg: &ModelConfig,
    img: &Tensor,
    voxels: &Tensor,
) -> Result<Tensor, ModelError> {
    let is = img.shape();
    let vs = voxels.shape();
    if is.len() != 3 || is[0] != cfg.image_channels {
        return Err(ModelError::BadInput(format!(
            "image must be [{},H,W], got {is:?}",
            cfg.image_channels
        )));
    }
    if vs.len() != 3 || vs[0] != cfg.event_bins || vs[1..] != is[1..] {
        return Err(ModelError::BadInput(format!(
            "voxels must be [{},{},{}], got {vs:?}",
            cfg.event_bins, is[1], is[2]
        )));
    }
    let (h, w) = (is[1], is[2]);
    let f = cfg.spatial_factor();
    if h % f != 0 || w % f != 0 {
        return Err(ModelError::BadInput(format!(
            "spatial dims {h}x{w} must be divisible by {f}"
        )));
    }

    let (img_feat, img_skips) = encode(tape, &params.img_enc, img)?;
    let (ev_feat, _ev_skips) = encode(tape, &params.ev_enc, voxels)?;
    let fused = tape.concat_channels(&img_feat, &ev_feat)?;
    let fused = tape.conv2d(&fused, &params.fuse.w, Some(&params.fuse.b), 1, 0)?;

    let (hb, wb) = (h / f, w / f);
    let d = cfg.token_dim;
    let flat = tape.reshape(&fused, vec![d, hb * wb])?;
    let tokens = tape.transpose(&flat)?;
    let tokens = attention_block(tape, &tokens, &params.attn, cfg.heads)?;
    let flat = tape.transpose(&tokens)?;
    let mut x = tape.reshape(&flat, vec![d, hb, wb])?;

    for (i, stage) in params.dec.iter().enumerate() {
        let up = tape.up2_nearest(&x)?;
        let skip = &img_skips[cfg.levels - 1 - i];
        let cat = tape.concat_channels(&up, skip)?;
        x = conv_block(tape, &cat, &stage.conv1, &stage.conv2)?;
    }
    let residual = tape.conv2d(&x, &params.head.w, Some(&params.head.b), 1, 1)?;
    Ok(tape.add(img, &residual)?)
}
