mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tinydense_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "tinydense",
    version,
    about = "Density-guided focusing and fusion toolkit for dense tiny objects"
)]
pub struct Cli {
    /// Seed for scene generation and parameter initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Worker threads for per-image work; outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate clustered synthetic scenes with annotations and noisy detections.
    Synth(SynthArgs),
    /// Ground-truth density map of one annotated image.
    GtDensity(GtDensityArgs),
    /// Calibrated density map D' in (0, 1).
    Calibrate(CalibrateArgs),
    /// Threshold a density map and refine it into at most two rectangles.
    SelectRegions(SelectRegionsArgs),
    /// Dense area focusing module forward pass.
    Dafm(DafmArgs),
    /// Dual filter fusion module forward pass.
    Dffm(DffmArgs),
    /// COCO-style average precision with tiny-object size buckets.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Fit the density branch to synthetic scenes by gradient descent.
    TrainDemo(TrainDemoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of scenes; image ids run upward from the scene spec's image id.
    #[arg(long, default_value_t = 1)]
    pub images: usize,
    /// Detection jitter in pixels.
    #[arg(long, default_value_t = 2.0)]
    pub jitter: f64,
    /// Probability of dropping each ground truth from the detections.
    #[arg(long, default_value_t = 0.2)]
    pub drop: f64,
    #[arg(long, default_value_t = 0.1)]
    pub score_noise: f64,
}

#[derive(Debug, Args)]
pub struct GtDensityArgs {
    #[arg(long)]
    pub ann: PathBuf,
    /// Image to render; defaults to the first image in the file.
    #[arg(long)]
    pub image_id: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Keep the top share of pixels (default 0.10).
    #[arg(long, conflicts_with = "absolute")]
    pub quantile: Option<f64>,
    /// Keep pixels with density at least this value.
    #[arg(long)]
    pub absolute: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub density: PathBuf,
    /// Parameter bundle JSON; initialized from the seed when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectRegionsArgs {
    #[arg(long)]
    pub density: PathBuf,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    /// Refined mask as a tensor file.
    #[arg(long)]
    pub out_mask: PathBuf,
    /// Rectangles as JSON, 1-based inclusive.
    #[arg(long)]
    pub regions: PathBuf,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DafmArgs {
    /// Features `[C, H, W]`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub density: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Write the parameters used.
    #[arg(long)]
    pub save_params: Option<PathBuf>,
    /// Attention width; defaults to the channel count.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = tinydense_core::dafm::DEFAULT_MAX_AGENTS)]
    pub max_agents: usize,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the refined mask, agent rows and stage-1 output.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DffmArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub density: PathBuf,
    /// Pooling kernels, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = tinydense_core::dffm::DEFAULT_KERNELS)]
    pub kernels: Vec<usize>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub save_params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-path outputs.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub dets: PathBuf,
    /// Per-image detection cap (default 100, or 1500 with --dense).
    #[arg(long)]
    pub max_dets: Option<usize>,
    #[arg(long)]
    pub dense: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also report AP per category at this IoU.
    #[arg(long)]
    pub per_category: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = tinydense_core::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = tinydense_core::gradcheck::TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Loss trace CSV; printed to stdout when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub save_params: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub w_reg: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_cls: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_dense: f64,
}

/// Failures that carry their own exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Usage(String),
    /// Gradient check above tolerance.
    Tolerance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Tolerance(_) => 4,
            Failure::Core(e) => match e {
                Error::InvalidArgument(_) | Error::Unsupported(_) => 2,
                Error::Format { .. } | Error::Annotation(_) | Error::Io(_) | Error::Json(_) => 3,
                Error::Numeric(_) => 4,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) | Failure::Tolerance(m) => m.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message().replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}
