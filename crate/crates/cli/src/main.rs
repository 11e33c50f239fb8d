use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geonew::data::Split;

mod case;
mod config;
mod error;
mod generate;
mod train;

use error::Numerical;

#[derive(Parser)]
#[command(name = "geonew", version, about = "Reduced Whitney-form neural solver on polygonal annuli")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of polygonal-annulus Poisson problems.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split, writing metrics and field dumps.
    Eval(EvalArgs),
    /// Solve one geometry with the reference solver and optionally a checkpoint.
    Solve(SolveArgs),
    /// Dump geometry features for one mesh as JSON.
    Features(FeaturesArgs),
    /// Run the structure checks for one geometry and model.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Dataset configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration: `{"dataset": "<manifest.json>", "train": {...}}`.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its configuration takes precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test_id")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SolveArgs {
    /// Case configuration (geometry, boundary values, forcing).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct FeaturesArgs {
    /// Mesh JSON; when omitted the mesh is generated from the case geometry.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also compute features on a rigidly moved copy and report the invariance check.
    #[arg(long, value_name = "DEG")]
    pub rotate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Check a trained model instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for `verify.json`; the report is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        anyhow::ensure!(n > 0, "--workers must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Generate(a) => generate::run(&a),
        Command::Train(a) => train::run_train(&a),
        Command::Eval(a) => train::run_eval(&a),
        Command::Solve(a) => case::run_solve(&a),
        Command::Features(a) => case::run_features(&a),
        Command::Verify(a) => case::run_verify(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GEONEW_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Numerical>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
