//! `evdeblur` - event-based single-image motion deblurring pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use clap::{Parser, Subcommand, ValueEnum};
use evdeblur_core::autodiff::{container, Tape, Tensor};
use evdeblur_core::events::{load_image_pnm, parse_event_csv, save_image_pnm, ImagePlane};
use evdeblur_core::kunet::{
    image_to_tensor, kunet_forward, tensor_to_image, voxel_to_tensor, KUnetParams,
};
use evdeblur_core::metrics::{evaluate_dir, tta_flip_infer, EvalOptions, MetricError};
use evdeblur_core::repr::{scer, split_voxels, voxelize, VoxelGrid};
use evdeblur_core::synth::{make_dataset, EventModel};
use evdeblur_core::training::{parse_config, train, ParsedConfig};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "evdeblur", version, about = "Event-based single-image motion deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum ReprKind {
    /// Bilinear temporal voxel grid.
    #[default]
    Voxel,
    /// Symmetric cumulative representation (even bins).
    Scer,
    /// Forward/backward split voxels (even bins; segments = bins - 1).
    Split,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of (blur, sharp, events) triples.
    Synth {
        /// Number of scenes to create.
        #[arg(long)]
        scenes: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Contrast threshold of the event model.
        #[arg(long, default_value_t = 0.2)]
        contrast: f64,
    },
    /// Convert an event CSV into a tensor-file representation.
    Voxelize {
        /// Input event CSV.
        #[arg(long)]
        events: PathBuf,
        /// Number of temporal bins of the representation.
        #[arg(long)]
        bins: usize,
        #[arg(long, value_enum, default_value_t)]
        repr: ReprKind,
        /// Output KUNT tensor file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network on a dataset directory.
    Train(Box<TrainArgs>),
    /// Deblur one blurry image with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Blurry input PPM.
        #[arg(long)]
        blur: PathBuf,
        /// Exposure event CSV.
        #[arg(long)]
        events: PathBuf,
        /// Output PPM path.
        #[arg(long)]
        out: PathBuf,
        /// Average over the four flip augmentations.
        #[arg(long)]
        tta: bool,
    },
    /// Score a prediction directory against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Quantize through 8-bit before scoring.
        #[arg(long)]
        quantize: bool,
        /// Score luminance instead of averaging RGB.
        #[arg(long)]
        luma: bool,
    },
    /// Print the parameter census and the effective config.
    Info {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Training flags mirror the config keys one-to-one; flags override the
/// config file.
#[derive(clap::Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory of (blur, sharp, events) triples.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    event_bins: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    kan_grid: Option<usize>,
    #[arg(long)]
    kan_degree: Option<usize>,
    #[arg(long)]
    image_channels: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    enlarge: Option<usize>,
    #[arg(long)]
    w_psnr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    w_edge: Option<f64>,
    #[arg(long)]
    tau_edge: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    evdeblur_core::events::EventError,
    evdeblur_core::events::PnmError,
    evdeblur_core::repr::ReprError,
    evdeblur_core::kunet::ModelError,
    evdeblur_core::training::TrainError,
    evdeblur_core::synth::SynthError,
    MetricError,
    evdeblur_core::autodiff::container::ContainerError
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Runtime(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            scenes,
            out,
            seed,
            contrast,
        } => cmd_synth(scenes, out, seed, contrast),
        Command::Voxelize {
            events,
            bins,
            repr,
            out,
        } => cmd_voxelize(events, bins, repr, out),
        Command::Train(args) => cmd_train(*args),
        Command::Infer {
            checkpoint,
            blur,
            events,
            out,
            tta,
        } => cmd_infer(checkpoint, blur, events, out, tta),
        Command::Eval {
            pred,
            gt,
            out,
            quantize,
            luma,
        } => cmd_eval(pred, gt, out, quantize, luma),
        Command::Info { config } => cmd_info(config),
    }
}

fn cmd_synth(scenes: usize, out: PathBuf, seed: u64, contrast: f64) -> Result<(), CliError> {
    if contrast <= 0.0 {
        return Err(CliError::Usage(format!(
            "--contrast must be positive, got {contrast}"
        )));
    }
    let model = EventModel {
        contrast,
        ..EventModel::default()
    };
    let manifest = make_dataset(scenes, &out, seed, &model)?;
    println!("wrote {scenes} scenes to {} (manifest {})", out.display(), manifest.display());
    Ok(())
}

fn cmd_voxelize(
    events: PathBuf,
    bins: usize,
    repr: ReprKind,
    out: PathBuf,
) -> Result<(), CliError> {
    // Flag-level validation happens before any file is touched, so usage
    // errors cannot leave partial outputs.
    if bins == 0 {
        return Err(CliError::Usage("--bins must be >= 1".into()));
    }
    match repr {
        ReprKind::Scer if !bins.is_multiple_of(2) => {
            return Err(CliError::Usage(format!(
                "--repr scer needs an even bin count, got {bins}"
            )));
        }
        ReprKind::Split if !bins.is_multiple_of(2) || bins < 2 => {
            return Err(CliError::Usage(format!(
                "--repr split needs an even bin count >= 2 (segments = bins - 1), got {bins}"
            )));
        }
        _ => {}
    }
    let text = std::fs::read_to_string(&events)?;
    let stream = parse_event_csv(&text)?;
    let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
    match repr {
        ReprKind::Voxel => {
            map.insert("voxel".into(), voxel_to_tensor(&voxelize(&stream, bins)?));
        }
        ReprKind::Scer => {
            map.insert("scer".into(), voxel_to_tensor(&scer(&stream, bins)?));
        }
        ReprKind::Split => {
            let sv = split_voxels(&stream, bins - 1)?;
            map.insert("split.forward".into(), voxel_to_tensor(&sv.forward));
            map.insert("split.backward".into(), voxel_to_tensor(&sv.backward));
        }
    }
    let bytes = container::save_tensors(&map)?;
    std::fs::write(&out, bytes)?;
    println!("wrote {repr:?} ({bins} bins) for {} events to {}", stream.len(), out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
        None => ParsedConfig::default(),
    };
    apply_overrides(&mut cfg, &args);
    let report = train(&cfg.model, &cfg.train, &args.data, &args.out)?;
    println!("checkpoint: {}", report.checkpoint_path.display());
    println!("metrics: {}", report.metrics_path.display());
    println!(
        "loss: first {:.6} last {:.6} over {} iterations",
        report.first_loss, report.last_loss, cfg.train.iters
    );
    Ok(())
}

fn apply_overrides(cfg: &mut ParsedConfig, a: &TrainArgs) {
    macro_rules! set {
        ($($section:ident . $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$field {
                cfg.$section.$field = v;
            })*
        };
    }
    set!(
        model.base_channels,
        model.levels,
        model.event_bins,
        model.heads,
        model.token_dim,
        model.kan_grid,
        model.kan_degree,
        model.image_channels,
        train.batch_size,
        train.patch,
        train.iters,
        train.lr_max,
        train.lr_min,
        train.beta1,
        train.beta2,
        train.weight_decay,
        train.enlarge,
        train.w_psnr,
        train.lambda1,
        train.lambda2,
        train.w_edge,
        train.tau_edge,
        train.seed,
        train.checkpoint_every,
        train.augment,
    );
}

fn load_inputs(
    blur: &PathBuf,
    events: &PathBuf,
) -> Result<(ImagePlane, evdeblur_core::events::EventStream), CliError> {
    let img = load_image_pnm(&std::fs::read(blur)?)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", blur.display())))?;
    let stream = parse_event_csv(&std::fs::read_to_string(events)?)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", events.display())))?;
    Ok((img, stream))
}

fn cmd_infer(
    checkpoint: PathBuf,
    blur: PathBuf,
    events: PathBuf,
    out: PathBuf,
    tta: bool,
) -> Result<(), CliError> {
    let bytes = std::fs::read(&checkpoint)?;
    let (params, cfg) = KUnetParams::load_checkpoint(&bytes)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", checkpoint.display())))?;
    let (img, stream) = load_inputs(&blur, &events)?;
    let grid = voxelize(&stream, cfg.event_bins)?;
    let mut forward = |i: &ImagePlane, v: &VoxelGrid| -> Result<ImagePlane, CliError> {
        let mut tape = Tape::inference();
        let pred = kunet_forward(&mut tape, &params, &cfg, &image_to_tensor(i), &voxel_to_tensor(v))?;
        Ok(tensor_to_image(&pred)?)
    };
    let restored = if tta {
        tta_flip_infer(&mut forward, &img, &grid)?
    } else {
        forward(&img, &grid)?
    };
    std::fs::write(&out, save_image_pnm(&restored))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(
    pred: PathBuf,
    gt: PathBuf,
    out: Option<PathBuf>,
    quantize: bool,
    luma: bool,
) -> Result<(), CliError> {
    let report = evaluate_dir(&pred, &gt, EvalOptions { quantize, luma })?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}

fn cmd_info(config: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = match &config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
        None => ParsedConfig::default(),
    };
    let params = KUnetParams::init(&cfg.model, cfg.train.seed)?;
    let m = &cfg.model;
    println!("base_channels = {}", m.base_channels);
    println!("levels = {}", m.levels);
    println!("event_bins = {}", m.event_bins);
    println!("heads = {}", m.heads);
    println!("token_dim = {}", m.token_dim);
    println!("kan_grid = {}", m.kan_grid);
    println!("kan_degree = {}", m.kan_degree);
    println!("image_channels = {}", m.image_channels);
    println!("parameters: {}", params.count_parameters());
    Ok(())
}
