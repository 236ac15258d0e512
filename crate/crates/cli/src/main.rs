use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rkrom_cli::commands::{run, Command, Context};
use rkrom_cli::config::PipelineConfig;
use rkrom_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "rkrom", version, about = "Reduced-order surrogates for parametric thermal models")]
struct Cli {
    #[command(subcommand)]
    command: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Sample parameters and integrate the full-order model.
    Simulate(StageArgs),
    /// Compute POD bases from the snapshots.
    Reduce(StageArgs),
    /// Train the surrogate ensembles.
    Train(StageArgs),
    /// Roll out the surrogates on the test cases and write the report.
    Evaluate(StageArgs),
    /// Render tables and plot-ready CSVs from the report.
    Report(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the sampling seed and the ensemble base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn execute(command: Command, args: StageArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let ctx = Context::new(config, out)?;
    pool.install(|| run(command, &ctx))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Stage::Simulate(a) => (Command::Simulate, a),
        Stage::Reduce(a) => (Command::Reduce, a),
        Stage::Train(a) => (Command::Train, a),
        Stage::Evaluate(a) => (Command::Evaluate, a),
        Stage::Report(a) => (Command::Report, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
