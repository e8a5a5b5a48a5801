use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")");

#[derive(Debug, Parser)]
#[command(name = "ufm", version = BUILD_ID, about = "Multimodal image matching: data, training, matching and evaluation")]
pub struct Cli {
    /// Root seed; every stream of randomness is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset (PGM images, geometry files, manifest).
    GenData(GenDataArgs),
    /// Write augmented crops and ground-truth patch matrices for manifest pairs.
    Augment(AugmentArgs),
    /// Run one pre-training stage.
    Pretrain(PretrainArgs),
    /// Run one fine-tuning stage.
    Finetune(FinetuneArgs),
    /// Match image pairs with a trained checkpoint.
    Match(MatchArgs),
    /// Evaluate match files against ground-truth geometry.
    Eval(EvalArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// List the tensors stored in a checkpoint.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeometryArg {
    Registered,
    Homography,
    TwoView,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of pairs.
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    /// Comma-separated modality pairs, cycled over the pair index.
    #[arg(long, default_value = "opt:opt")]
    pub modes: String,
    /// Image side in pixels.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// Geometry relating the two images of a pair.
    #[arg(long, value_enum, default_value = "registered")]
    pub geometry: GeometryArg,
    /// Corner displacement bound for homography pairs, in pixels.
    #[arg(long, default_value_t = 6.0)]
    pub warp: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Crop side in pixels (multiple of 8).
    #[arg(long)]
    pub crop: Option<usize>,
    /// Disable the +1 offset in the center-to-patch rule.
    #[arg(long)]
    pub no_plus_one: bool,
}

/// Flags shared by the training commands; they override configuration keys.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, default_value = "data/manifest.txt")]
    pub data: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Directory for checkpoints and the metrics log.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Extra `key=value` configuration override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Stage number: 1 (all data), 2 (one modality), 3 (one modality pair).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Modality trained in stage 2.
    #[arg(long)]
    pub modality: Option<String>,
    /// Modality pair trained in stage 3, e.g. `opt:sar`.
    #[arg(long)]
    pub pair: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneMode {
    Same,
    Cross,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Same-modal or cross-modal fine-tuning.
    #[arg(long, value_enum)]
    pub mode: FinetuneMode,
    /// Modality for same-modal fine-tuning.
    #[arg(long)]
    pub modality: Option<String>,
    /// Modality pair for cross-modal fine-tuning, e.g. `opt:sar`.
    #[arg(long)]
    pub pair: Option<String>,
    /// Train on every selected pair instead of a seeded tenth.
    #[arg(long)]
    pub all_data: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Configuration file holding model keys (layers, hidden, heads, m_top, tau, theta).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Match every pair of this manifest; writes `<id>.txt` under `--out`.
    #[arg(long, conflicts_with_all = ["image_a", "image_b"])]
    pub manifest: Option<PathBuf>,
    /// First image (PGM).
    #[arg(long, requires = "image_b")]
    pub image_a: Option<PathBuf>,
    /// Second image (PGM).
    #[arg(long, requires = "image_a")]
    pub image_b: Option<PathBuf>,
    /// Modality of the first image.
    #[arg(long, default_value = "OPT")]
    pub modality_a: String,
    /// Modality of the second image.
    #[arg(long, default_value = "OPT")]
    pub modality_b: String,
    /// Output match file, or directory with `--manifest`.
    #[arg(long)]
    pub out: PathBuf,
    /// Local refinement window radius in fine cells; global when absent.
    #[arg(long)]
    pub window: Option<usize>,
    /// Write coarse patch-center matches instead of refined ones.
    #[arg(long)]
    pub coarse: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Mma,
    Auc,
    Acc,
    Rmse,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Metric to compute.
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Match file (repeatable; pairs with `--gt` in order).
    #[arg(long)]
    pub matches: Vec<PathBuf>,
    /// Ground-truth geometry file (repeatable).
    #[arg(long)]
    pub gt: Vec<PathBuf>,
    /// Evaluate every manifest pair whose match file exists in `--matches-dir`.
    #[arg(long, requires = "matches_dir", conflicts_with_all = ["matches", "gt"])]
    pub manifest: Option<PathBuf>,
    /// Directory of `<id>.txt` match files.
    #[arg(long)]
    pub matches_dir: Option<PathBuf>,
    /// Image width for corner errors (auc, acc).
    #[arg(long)]
    pub width: Option<usize>,
    /// Image height for corner errors (auc, acc).
    #[arg(long)]
    pub height: Option<usize>,
    /// Write the `metric,threshold,value` CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the MMA curve (`threshold,value`) here.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Case to check (repeatable): loss_coarse, loss_epipolar, loss_cycle, loss_fine, loss_total, model_forward.
    #[arg(long)]
    pub case: Vec<String>,
    /// Randomized instances per case.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint file.
    pub path: PathBuf,
    /// Print one JSON object per tensor.
    #[arg(long)]
    pub json: bool,
}
