//! `ssdm`: command-line front end for single-step diffusion reconstruction.

mod commands;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ssdm", version, about = "Single-step diffusion MRI reconstruction toolkit")]
pub struct Cli {
    /// Worker threads for data-parallel sections (fallback: SSDM_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write random ellipse phantoms as CIQ images.
    Phantom(PhantomArgs),
    /// Draw an undersampling mask.
    Mask(MaskArgs),
    /// Simulate single- or multi-coil acquisitions of an image.
    Simulate(SimulateArgs),
    /// Pretrain the conditional conv denoiser.
    Pretrain(PretrainArgs),
    /// Iterative step-halving distillation of a pretrained model.
    Distill(DistillArgs),
    /// Single-coil shortcut reconstruction.
    Reconstruct(ReconstructArgs),
    /// Multi-coil reconstruction with estimated sensitivities.
    #[command(name = "reconstruct-mc")]
    ReconstructMc(ReconstructMcArgs),
    /// Compare two images; prints a JSON metric report.
    Eval(EvalArgs),
    /// Pixelwise standard deviation over repeated reconstructions.
    Uncertainty(UncertaintyArgs),
    /// Full sampling with the analytic denoiser on a Gaussian toy problem.
    #[command(name = "toy-oracle")]
    ToyOracle(ToyOracleArgs),
    /// DC / selective-distillation ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct MaskOpts {
    /// gaussian1d, gaussian2d, poisson2d, random1d or full [default: gaussian1d].
    #[arg(long)]
    pub kind: Option<String>,
    /// Requested acceleration factor [default: 4].
    #[arg(long)]
    pub af: Option<f64>,
    /// ACS lines (1D kinds) or ACS radius (2D kinds) [default: 4].
    #[arg(long)]
    pub acs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add a smooth spatial phase.
    #[arg(long)]
    pub phase: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub mask: MaskOpts,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Fully sampled CIQ image.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub mask: MaskOpts,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sd: f64,
    /// Number of synthetic receive coils; 1 gives a single-coil acquisition.
    #[arg(long, default_value_t = 1)]
    pub coils: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for kspace.ciq, mask.ciq and zero_fill.ciq.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainData {
    /// Directory of CIQ training images.
    #[arg(long, conflicts_with = "phantoms")]
    pub data: Option<PathBuf>,
    /// Generate this many ellipse phantoms instead of reading --data.
    #[arg(long)]
    pub phantoms: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub phase: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainData,
    /// JSON pretraining config; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskOpts,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub t_steps: Option<usize>,
    #[arg(long)]
    pub t0: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Channel widths per level, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillOpts {
    /// JSON distillation config; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub mask: MaskOpts,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Optimizer steps per round.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long, visible_alias = "teacher")]
    pub model: PathBuf,
    #[command(flatten)]
    pub train: TrainData,
    #[command(flatten)]
    pub opts: DistillOpts,
    /// Drop the data-consistency loss term.
    #[arg(long)]
    pub no_dc: bool,
    /// Distill over the whole teacher path instead of its last half.
    #[arg(long)]
    pub whole_path: bool,
    /// Output directory for per-round checkpoints and the report.
    #[arg(long, visible_alias = "out-dir")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub kspace: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Start index on the model grid; defaults to the checkpoint's.
    #[arg(long)]
    pub t0: Option<usize>,
    /// final, every or off.
    #[arg(long, default_value = "final")]
    pub dc: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructMcArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Multi-coil CIQ k-space.
    #[arg(long)]
    pub kspace: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub t0: Option<usize>,
    /// Odd sensitivity-estimation window.
    #[arg(long, default_value_t = 7)]
    pub window: usize,
    /// Re-estimate sensitivities before the final combination.
    #[arg(long)]
    pub reestimate: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim,hfen,xsim")]
    pub metrics: Vec<String>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub kspace: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub t0: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Reuse one seed for every repeat.
    #[arg(long)]
    pub fixed_seed: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for mean.ciq, sd.ciq and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyOracleArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Pretrained teacher checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub train: TrainData,
    #[command(flatten)]
    pub opts: DistillOpts,
    /// Held-out phantoms for evaluation.
    #[arg(long, default_value_t = 32)]
    pub test_count: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_seed: u64,
    /// Cells as dc/selective pairs, e.g. "dc/selective,no-dc/whole-path"; default all four.
    #[arg(long, value_delimiter = ',')]
    pub cells: Option<Vec<String>>,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = commands::configure_threads(cli.threads) {
        log::event("error", &[("message", e.to_string())]);
        return ExitCode::from(1);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            log::event("error", &[("message", e.to_string())]);
            ExitCode::from(2)
        }
    }
}
