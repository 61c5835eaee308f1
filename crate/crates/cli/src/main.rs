//! `fusion`: generate the synthetic benchmark, train, adapt, evaluate, sweep and diagnose.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusion_core::TaskKind;

use crate::error::CliError;

const OVERRIDES_HELP: &str = "Any config key can also be set as `--<section>.<key> <value>`, \
e.g. `--train.lr 0.001` or `--dataset.shift_profile [0,1,2]`. Sections: dataset, model, train, adapt, experiment. \
Run `fusion config` to print every key with its default. FUSION_THREADS caps the worker count (default: logical cores).";

#[derive(Parser, Debug)]
#[command(name = "fusion", version, about = "Test-time adaptation of batch-norm statistics under stain shift", after_help = OVERRIDES_HELP)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file; flags override its values [default: built-in defaults]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream [default: experiment.seed = 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ProtocolFlags {
    /// source-running | per-batch | target-running | fused | source-prior [default: adapt.policy = fused]
    #[arg(long)]
    pub policy: Option<String>,
    /// Fusion weight on the target term [default: adapt.beta = 0.9]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Prior pseudo-count of source-prior [default: adapt.n_prior = 20]
    #[arg(long)]
    pub n_prior: Option<usize>,
    /// Accumulation batches in the first step [default: adapt.steps = 50]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Batch size of both steps, at least 2 [default: adapt.batch_size = 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of centers; spreads shifts evenly over [0, 2] unless --shift-profile is given [default: 5]
    #[arg(long)]
    pub centers: Option<usize>,
    /// Training patches per center [default: dataset.train_samples = 2000]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Test patches per center [default: dataset.test_samples = 500]
    #[arg(long)]
    pub test_samples: Option<usize>,
    /// Comma-separated shift magnitudes, one per center [default: 0,0.5,1,1.5,2]
    #[arg(long)]
    pub shift_profile: Option<String>,
    /// classification | dense-prediction [default: dataset.task = classification]
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Patch side in pixels, a multiple of 4 and at least 16 [default: dataset.patch_size = 32]
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Benchmark directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Center to train on [default: experiment.source = 0]
    #[arg(long)]
    pub source_center: Option<usize>,
    /// Output directory for model.fusb and train_log.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    /// Checkpoint written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target center directory; only pixels are read
    #[arg(long)]
    pub target: PathBuf,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
    /// Output directory for adapted.fusb and the predictions
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// predictions.fusb written by adapt
    #[arg(long)]
    pub predictions: PathBuf,
    /// Target center directory with labels or masks
    #[arg(long)]
    pub target: PathBuf,
    /// Metrics CSV to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Checkpoint written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Benchmark directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated target centers [default: experiment.targets, or all but the source]
    #[arg(long)]
    pub targets: Option<String>,
    /// Comma-separated step counts [default: experiment.sweep_steps = 1,5,10,20,50]
    #[arg(long = "steps")]
    pub step_counts: Option<String>,
    /// Comma-separated batch sizes [default: experiment.sweep_batch_sizes = 8,16,32]
    #[arg(long)]
    pub batch_sizes: Option<String>,
    /// Policy name [default: adapt.policy = fused]
    #[arg(long)]
    pub policy: Option<String>,
    /// Fusion weight [default: adapt.beta = 0.9]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Output directory for sweep_grid.csv and sweep_results.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Checkpoint written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Benchmark directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// [default: experiment.source = 0]
    #[arg(long)]
    pub source_center: Option<usize>,
    /// [default: the last center]
    #[arg(long)]
    pub target_center: Option<usize>,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
    /// Histogram bins [default: experiment.histogram_bins = 40]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Output directory for moments.csv, deviation.csv and histograms/
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OutArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the multi-center benchmark as per-center directories
    GenData(GenDataArgs),
    /// Train the reference network on one center
    Train(TrainArgs),
    /// Run the two-step protocol on unlabeled target images
    Adapt(AdaptArgs),
    /// Score predictions against the target annotations
    Evaluate(EvaluateArgs),
    /// Steps by batch-size grid of a statistics-accumulating policy
    Sweep(SweepArgs),
    /// Post-normalization moments and densities per BN channel
    Diagnose(DiagnoseArgs),
    /// Train every repetition and evaluate the full policy roster
    Experiment(OutArgs),
    /// gen-data, train, adapt, evaluate, sweep and diagnose in one go
    ReproduceAll(OutArgs),
    /// Print the effective configuration as TOML
    Config,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FUSION_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("FUSION_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(format!("FUSION_THREADS: {e}")))
}

fn run() -> Result<(), CliError> {
    let (args, overrides) = config::extract_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_threads()?;
    let ctx = commands::Context::new(&cli.common, &overrides)?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a).map(|_| ()),
        Command::Adapt(a) => commands::adapt(&ctx, &a),
        Command::Evaluate(a) => commands::evaluate(&a).map(|_| ()),
        Command::Sweep(a) => commands::sweep(&ctx, &a),
        Command::Diagnose(a) => commands::diagnose(&ctx, &a),
        Command::Experiment(a) => commands::experiment(&ctx, &a.out),
        Command::ReproduceAll(a) => commands::reproduce_all(&ctx, &a.out),
        Command::Config => {
            print!("{}", ctx.config.normalized());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
