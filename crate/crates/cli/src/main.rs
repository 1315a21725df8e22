mod commands;
mod config;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

/// Exit status for each failure class.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Pipeline(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0} verification check(s) failed")]
    VerifyFailed(usize),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn pipeline(e: impl std::fmt::Display) -> Self {
        Self::Pipeline(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::VerifyFailed(_) => 1,
            Self::Numerical(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pixelfield",
    version,
    about = "Image-conditioned radiance fields on synthetic scenes"
)]
struct Cli {
    /// Cap on worker threads; all cores by default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of posed images.
    GenData(GenDataArgs),
    /// Write an initial checkpoint without training.
    Init(InitArgs),
    /// Train, writing checkpoints and a CSV loss log.
    Train(TrainArgs),
    /// Render one target pose from a few source views.
    Render(RenderArgs),
    /// Render every non-input view and report PSNR and SSIM.
    Eval(EvalArgs),
    /// Run the built-in numerical checks.
    Verify,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub views: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct InitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// All parameters zero: density 0 and colour 0.5 everywhere.
    #[arg(long)]
    pub zero: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; its configuration takes precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override `train.total_iters`.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Override `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `train.learning_rate`.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override `checkpoint_every`.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Scene id (e.g. `scene_003`) or index.
    #[arg(long)]
    pub scene: String,
    /// Comma-separated source view indices.
    #[arg(long)]
    pub views: String,
    /// Target camera as inline JSON or a path to a JSON file.
    #[arg(
        long,
        conflicts_with = "target_view",
        required_unless_present = "target_view"
    )]
    pub target_pose: Option<String>,
    /// Use the camera of this dataset view as the target.
    #[arg(long)]
    pub target_view: Option<usize>,
    /// Raw float image; a PNG preview is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Random stratified sampling with this seed instead of midpoints.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated input view indices.
    #[arg(long)]
    pub inputs: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated scene ids or indices; all scenes by default.
    #[arg(long)]
    pub scenes: Option<String>,
    /// Zero the feature-injection layers before rendering.
    #[arg(long)]
    pub zero_injection: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Init(a) => commands::init(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Verify => commands::verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
