use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hnpe_cli::commands::{cmd_evaluate, cmd_figures, cmd_simulate, cmd_sweep, cmd_train, PosteriorSource};
use hnpe_cli::config::{ExperimentConfig, ModelKind, Overrides};
use hnpe_cli::{init_workers, CliError, CliResult};

/// Hierarchical neural posterior estimation experiments.
///
/// Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
/// The worker thread count is read from HNPE_WORKERS.
#[derive(Parser)]
#[command(name = "hnpe", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must not exist or be empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Simulations per round.
    #[arg(long, global = true)]
    sims: Option<usize>,
    /// Number of extra observations N.
    #[arg(long = "n-extra", global = true)]
    n_extra: Option<usize>,
    #[arg(long, value_enum, global = true)]
    model: Option<ModelKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a prior dataset.
    Simulate,
    /// Run the multi-round training procedure.
    Train {
        /// Use this dataset for the first round instead of simulating.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Sample a posterior at a bundle and compute its metrics.
    Evaluate {
        #[arg(long, conflicts_with = "exact", required_unless_present = "exact")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the exact toy posterior instead of a checkpoint.
        #[arg(long)]
        exact: bool,
        /// Bundle JSON; defaults to the configured observation.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Repeat a metric over a grid of N or of simulation budgets.
    Sweep,
    /// Draw figures from result directories.
    Figures {
        /// Directory holding results, directly or in subdirectories.
        #[arg(long)]
        input: PathBuf,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model,
            seed: self.seed,
            out: self.out.clone(),
            rounds: self.rounds,
            sims: self.sims,
            n_extra: self.n_extra,
        }
    }

    fn config(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides())
    }
}

fn run(cli: Cli) -> CliResult<()> {
    init_workers()?;
    let manifest = match &cli.command {
        Command::Simulate => cmd_simulate(&cli.common.config()?)?,
        Command::Train { dataset } => cmd_train(&cli.common.config()?, dataset.as_deref())?,
        Command::Evaluate {
            checkpoint,
            exact,
            bundle,
        } => {
            let source = match (checkpoint, exact) {
                (Some(p), false) => PosteriorSource::Checkpoint(p),
                _ => PosteriorSource::Exact,
            };
            cmd_evaluate(&cli.common.config()?, source, bundle.as_deref())?
        }
        Command::Sweep => cmd_sweep(&cli.common.config()?)?,
        Command::Figures { input } => {
            let out = cli.common.out.clone().unwrap_or_else(|| input.join("figures"));
            cmd_figures(input, &out)?
        }
    };
    for f in &manifest.files {
        println!("{}", f.path);
    }
    Ok(())
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Validation(_) => "invalid input",
                CliError::Runtime(_) => "error",
            };
            eprintln!("{kind}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
