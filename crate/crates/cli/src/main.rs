use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::Settings;

/// Knee osteoarthritis grading pipeline.
#[derive(Debug, Parser)]
#[command(name = "koa", version, about)]
struct Cli {
    /// Config file with `key = value` entries, optionally under
    /// `[subcommand]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply CLAHE to every PGM under a directory tree.
    Prep(PrepArgs),
    /// Train a denoiser on one grade's training images.
    DiffTrain(DiffTrainArgs),
    /// Sample images from a trained denoiser.
    DiffSample(DiffSampleArgs),
    /// Upscale a directory of PGMs (external tool or built-in Lanczos-3).
    Upscale(UpscaleArgs),
    /// Split a dataset tree and optionally merge generated images.
    Assemble(AssembleArgs),
    /// Pretrain the classifier backbone on procedural textures.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier with the two-stage protocol.
    Train(TrainArgs),
    /// Evaluate a classifier on one split of a manifest.
    Eval(EvalArgs),
    /// Write a Grad-CAM overlay for one image.
    Gradcam(GradcamArgs),
    /// Run the original / preprocessed / augmented experiments.
    Experiment(ExperimentArgs),
    /// Render a results table from saved metrics files.
    Report(ReportArgs),
    /// Write a synthetic pseudo-radiograph dataset tree.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct PrepArgs {
    /// Input tree (defaults to the data root).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Tile side in pixels.
    #[arg(long)]
    tile: Option<usize>,
    /// Clip limit as a fraction of the tile's pixel count.
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Debug, Args)]
struct DiffTrainArgs {
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    grade: u8,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Skip CLAHE on the training images.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    min_steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DiffSampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory, filled with `00000.pgm`, `00001.pgm`, ...
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct UpscaleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Shell command with `{in}` and `{out}` placeholders.
    #[arg(long)]
    command: Option<String>,
    #[arg(long)]
    intermediate: Option<usize>,
    /// Final side length.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct AssembleArgs {
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Directory of `{grade}/*.pgm` generated images.
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Generated images added per grade 1-4.
    #[arg(long)]
    per_class_count: Option<usize>,
    /// Variant recorded when no generated images are merged.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pretrained backbone; a fresh head is attached.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Input size when no pretrained checkpoint is given.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    unfreeze_last: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `test` or `valid`.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Target grade (defaults to the predicted one).
    #[arg(long)]
    class: Option<usize>,
    /// Backbone stage whose activations are used (0-3).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    blend: Option<f64>,
    /// Overlay PPM to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale PGM of the raw map.
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Working directory for generated images and checkpoints.
    #[arg(long)]
    work: PathBuf,
    /// `all`, `original`, `preprocessed` or `augmented`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_class_count: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    unfreeze_last: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    upscale_command: Option<String>,
    /// Load `denoiser-{grade}.ckpt` files from here instead of training.
    #[arg(long)]
    denoisers: Option<PathBuf>,
    /// Metrics CSV to write.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// `markdown` or `csv`.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metrics CSV files written by `experiment`.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Fraction of the reference grade totals (3857/1770/2578/1286/295).
    #[arg(long)]
    scale: Option<f64>,
    /// Explicit per-grade counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let settings = Settings::new(cli.config.as_deref())?;
    match cli.command {
        Command::Prep(a) => commands::prep(&settings, a),
        Command::DiffTrain(a) => commands::diff_train(&settings, a),
        Command::DiffSample(a) => commands::diff_sample(&settings, a),
        Command::Upscale(a) => commands::upscale(&settings, a),
        Command::Assemble(a) => commands::assemble(&settings, a),
        Command::Pretrain(a) => commands::pretrain(&settings, a),
        Command::Train(a) => commands::train(&settings, a),
        Command::Eval(a) => commands::eval(&settings, a),
        Command::Gradcam(a) => commands::gradcam(&settings, a),
        Command::Experiment(a) => commands::experiment(&settings, a),
        Command::Report(a) => commands::report(&settings, a),
        Command::Synth(a) => commands::synth(&settings, a),
    }
}
