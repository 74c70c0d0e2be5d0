//! `attnscope` — attention rollout, localization, part discovery, and the
//! staged classification pipeline from the command line.
//!
//! Exit codes: 0 on success, 1 on validation/usage errors, 2 on I/O errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "attnscope",
    version,
    about = "Attention maps, object/part localization, and the staged pipeline for small ViTs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FusionArg {
    Mean,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RatioModeArg {
    Linear,
    Area,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    Avg,
    Gem,
    Max,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FillArg {
    Zero,
    Mean,
}

#[derive(Args, Debug)]
pub struct OutArgs {
    /// Directory for output files; created if missing
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SeedArg {
    /// RNG seed; defaults to $ATTNSCOPE_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ScoringArgs {
    /// Part-kernel side as a fraction of the map side
    #[arg(long)]
    pub kernel_ratio: Option<f64>,
    /// Interpret --kernel-ratio as a side fraction or an area fraction
    #[arg(long, value_enum)]
    pub ratio_mode: Option<RatioModeArg>,
    /// Snap the kernel side down to a multiple of this many cells
    #[arg(long)]
    pub kernel_snap: Option<usize>,
    /// Window stride in map cells
    #[arg(long)]
    pub stride: Option<usize>,
    /// Number of part regions to keep after NMS
    #[arg(long)]
    pub topk: Option<usize>,
    /// NMS IoU rejection threshold
    #[arg(long)]
    pub iou: Option<f64>,
    /// Window pooling: plain average, generalized mean, or max
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Generalized-mean exponent, used with --pooling gem
    #[arg(long)]
    pub gem_p: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collapse an attention stack into a CLS-to-patch attention map
    Rollout {
        /// Attention stack tensor (layers x heads x tokens x tokens)
        #[arg(long)]
        attn: PathBuf,
        /// Optional image; adds an overlay upsampled to its resolution
        #[arg(long)]
        image: Option<PathBuf>,
        /// How to fuse heads within a layer
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Run configuration file (key=value)
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Threshold an attention map and emit the object bounding box
    Localize {
        /// Attention stack tensor; alternative to --image + --weights
        #[arg(long)]
        attn: Option<PathBuf>,
        /// Input image (PNG or PPM)
        #[arg(long)]
        image: Option<PathBuf>,
        /// Encoder weights file (needed when no --attn is given)
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Run configuration file (key=value)
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score sliding windows over an attention map; print top part boxes
    Parts {
        #[arg(long)]
        attn: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Run configuration file (key=value)
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Apply attention-guided erase and crop to images
    Augment {
        /// Input image; repeat the flag for a batch
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        /// Shared attention stack (single-image use)
        #[arg(long)]
        attn: Option<PathBuf>,
        /// Encoder weights; computes a map per image
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Run configuration file (key=value)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Erase probability override
        #[arg(long)]
        erase_p: Option<f64>,
        /// Erase threshold override (fraction of the map maximum)
        #[arg(long)]
        erase_t: Option<f64>,
        /// Fill erased pixels with zero or the per-channel mean
        #[arg(long, value_enum)]
        fill: Option<FillArg>,
        /// Process the batch with this many worker threads
        #[arg(long)]
        parallel: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the three-stage pipeline (full image, object crop, parts)
    Pipeline {
        /// Input image; repeat the flag for a batch
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        /// Encoder weights; omitted = seeded random weights
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Run configuration file (key=value)
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Process the batch with this many worker threads
        #[arg(long)]
        parallel: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the classifier head on the synthetic two-class quadrant set
    TrainToy {
        /// Dataset size
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Training epochs
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Learning rate
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        /// Run configuration file (key=value)
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Blend a map (or rolled-out stack) and optional boxes over an image
    Overlay {
        #[arg(long)]
        image: PathBuf,
        /// 2-D map or 4-D attention stack tensor; auto-detected
        #[arg(long)]
        attn: PathBuf,
        /// Text file of `x0 y0 x1 y1 score` lines to draw
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// Run configuration file (key=value)
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the built-in oracle suites; print one pass/fail line each
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_io() { 2 } else { 1 })
        }
    }
}
