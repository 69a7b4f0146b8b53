use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsglab::commands;
use gsglab::error::{CliError, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "gsglab",
    version,
    about = "Guided stop-gradient experiments at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write manifest.json, metrics.csv and checkpoint.txt.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print `k,knn_acc,probe_acc,collapse` for a checkpoint.
    Eval {
        #[arg(short)]
        k: usize,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Every strategy with and without the predictor, over several seeds.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// One run per batch size with equal total updates.
    SweepBatch {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let r = commands::cmd_train(&config, &out)?;
            eprintln!(
                "trained {} epochs ({} updates); final kNN {}",
                r.metrics.len(),
                r.manifest.total_updates,
                r.final_knn().map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Eval { k, ckpt, config } => {
            println!("{}", commands::cmd_eval(&ckpt, &config, k)?.csv_line());
        }
        Command::Ablate { config, out, seeds } => {
            let cells = commands::cmd_ablate(&config, &out, seeds)?;
            let failed = cells.iter().filter(|c| c.result.is_err()).count();
            eprintln!("{} cells, {failed} failed", cells.len());
        }
        Command::SweepBatch { config, sizes, out } => {
            let points = commands::cmd_sweep_batch(&config, &sizes, &out)?;
            eprintln!("{} batch sizes", points.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("gsglab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
