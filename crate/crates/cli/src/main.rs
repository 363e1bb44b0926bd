use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use error::CliError;

#[derive(Parser)]
#[command(name = "partfield", version, about = "Part-aware point feature fields and reach policies")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Global seed; replaces the dataset seed and derives the training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct FieldArgs {
    /// Trained feature-field checkpoint.
    #[arg(long, required_unless_present = "raw", conflicts_with = "raw")]
    pub field_ckpt: Option<PathBuf>,

    /// Use standardized raw descriptors instead of a trained field.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a posed, part-labeled dataset as JSON lines with a manifest.
    GenData(commands::GenData),
    /// Train the feature-refinement network.
    TrainField(commands::TrainField),
    /// Record scripted expert demonstrations for the seen reach tasks.
    GenDemos(commands::GenDemos),
    /// Train the diffusion policy on recorded demonstrations.
    TrainPolicy(commands::TrainPolicy),
    /// Cluster each instance and report matched mIoU per category.
    EvalSeg(commands::EvalSeg),
    /// Nearest-neighbor correspondence between same-category instances.
    EvalCorr(commands::EvalCorr),
    /// Roll out a policy on the evaluation splits.
    Rollout(commands::Rollout),
    /// Write a colorized PLY of one instance's feature field.
    ExportPly(commands::ExportPly),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(c) => c.run(),
        Command::TrainField(c) => c.run(),
        Command::GenDemos(c) => c.run(),
        Command::TrainPolicy(c) => c.run(),
        Command::EvalSeg(c) => c.run(),
        Command::EvalCorr(c) => c.run(),
        Command::Rollout(c) => c.run(),
        Command::ExportPly(c) => c.run(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("partfield: {e}");
            e.exit_code()
        }
    }
}
