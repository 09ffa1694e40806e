mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use satdet_core::detector::SizeClass;
use satdet_core::TrackingMode;

#[derive(Parser, Debug)]
#[command(
    name = "satdet",
    version,
    about = "Synthetic RSO imagery, detector training, int8 conversion and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render labeled observation sequences to PNG plus a manifest.
    Generate(GenerateArgs),
    /// Split an unaugmented dataset into train and val.
    Split(SplitArgs),
    /// Expand a dataset by the 8 rotations/flips of the pixel grid.
    Augment(AugmentArgs),
    /// Train a float detector.
    Train(TrainArgs),
    /// Run a checkpoint on images and write detections and annotated previews.
    Infer(InferArgs),
    /// Calibrate and convert a float checkpoint to int8.
    Quantize(QuantizeArgs),
    /// Precision, recall and F1 of one or more checkpoints on a dataset.
    Eval(EvalArgs),
    /// Per-frame latency of one or more checkpoints.
    Bench(BenchArgs),
    /// generate, split, augment, train, quantize, eval and bench from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    RateTrack,
    Sidereal,
}

impl From<ModeArg> for TrackingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::RateTrack => TrackingMode::RateTrack,
            ModeArg::Sidereal => TrackingMode::Sidereal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SizeArg {
    Small,
    Large,
}

impl From<SizeArg> for SizeClass {
    fn from(s: SizeArg) -> Self {
        match s {
            SizeArg::Small => SizeClass::Small,
            SizeArg::Large => SizeClass::Large,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// SceneConfig JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub observations: usize,
    #[arg(long, default_value_t = 10)]
    pub frames_per_obs: usize,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixed RSO count per frame.
    #[arg(long, conflicts_with = "rso_range")]
    pub rso_count: Option<usize>,
    /// Per-observation RSO count drawn from `MIN-MAX`, e.g. `1-3`.
    #[arg(long)]
    pub rso_range: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes `train/` and `val/` under this directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, value_enum, default_value = "small")]
    pub size: SizeArg,
    /// TrainConfig JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; the sidecar and `<stem>.log.json` go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PNG or PGM frames.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms_iou: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest whose frames drive calibration.
    #[arg(long)]
    pub calib: PathBuf,
    /// Use at most this many calibration frames, in manifest order.
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// One or more checkpoints; each gets a row.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 0.3)]
    pub match_iou: f64,
    /// Write the reports as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Frames to time; without it, `--frames` synthetic frames are rendered.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.25)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms_iou: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
