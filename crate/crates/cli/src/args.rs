use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Volumetric tumor segmentation with residual dense encoders, stacked
/// convolution skips and layered attention.
///
/// Every command accepts `--config run.json` with optional `network`,
/// `train`, `phantom` and `split` sections. Precedence: built-in defaults,
/// then the config file, then command-line flags.
#[derive(Debug, Parser)]
#[command(name = "slca", version, about, long_about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic multi-modal phantoms with nested tumor labels.
    Phantom(PhantomArgs),
    /// Train a network on a directory of cases and write a checkpoint.
    Train(TrainArgs),
    /// Segment one volume with a trained checkpoint.
    Segment(SegmentArgs),
    /// Compare predicted label files against ground truth.
    Evaluate(EvaluateArgs),
    /// Verify analytic gradients of every block against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Run configuration (JSON); the `phantom` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of cases. Case `i` uses seed `phantom.seed + i`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Overrides `phantom.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); `network`, `train` and `split` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of `<case>.img.svol` / `<case>.lbl.svol` pairs.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides `train.seed` (batch order).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image volume (`.img.svol`).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output label volume (`.lbl.svol`).
    #[arg(long)]
    pub out: PathBuf,
    /// Write one P6 overlay per axial slice into this directory.
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted `<case>.lbl.svol` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth `<case>.lbl.svol` files.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report CSV with per-case rows and a mean row per region.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run configuration (JSON); the `network` section sets rank, dilations,
    /// residual mode, resampling and seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scales analytic gradients by 1.5 so every check must fail.
    #[arg(long, hide = true)]
    pub fault_inject: bool,
}
