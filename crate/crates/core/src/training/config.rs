//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are skipped; every other line
//! must be `key = value` with a known key. Keys mirror the CLI flag names
//! one-to-one.

use super::{TrainConfig, TrainError};
use crate::kunet::ModelConfig;

/// A parsed configuration: model plus training settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parses config text over the defaults. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<ParsedConfig, TrainError> {
    let mut cfg = ParsedConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| TrainError::Config {
            line: line_no,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        apply_key(&mut cfg, key.trim(), value.trim()).map_err(|msg| TrainError::Config {
            line: line_no,
            msg,
        })?;
    }
    cfg.model.validate().map_err(|e| TrainError::Config {
        line: 0,
        msg: e.to_string(),
    })?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut ParsedConfig, key: &str, value: &str) -> Result<(), String> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("bad value {value:?} for key {key:?}"))
    }
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    match key {
        "base_channels" => m.base_channels = parse(key, value)?,
        "levels" => m.levels = parse(key, value)?,
        "event_bins" => m.event_bins = parse(key, value)?,
        "heads" => m.heads = parse(key, value)?,
        "token_dim" => m.token_dim = parse(key, value)?,
        "kan_grid" => m.kan_grid = parse(key, value)?,
        "kan_degree" => m.kan_degree = parse(key, value)?,
        "image_channels" => m.image_channels = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "patch" => t.patch = parse(key, value)?,
        "iters" => t.iters = parse(key, value)?,
        "lr_max" => t.lr_max = parse(key, value)?,
        "lr_min" => t.lr_min = parse(key, value)?,
        "beta1" => t.beta1 = parse(key, value)?,
        "beta2" => t.beta2 = parse(key, value)?,
        "weight_decay" => t.weight_decay = parse(key, value)?,
        "enlarge" => t.enlarge = parse(key, value)?,
        "w_psnr" => t.w_psnr = parse(key, value)?,
        "lambda1" => t.lambda1 = parse(key, value)?,
        "lambda2" => t.lambda2 = parse(key, value)?,
        "w_edge" => t.w_edge = parse(key, value)?,
        "tau_edge" => t.tau_edge = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
        "augment" => t.augment = parse(key, value)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}
