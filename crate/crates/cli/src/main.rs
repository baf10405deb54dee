use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splineop_cli::commands::{self, TrainArgs};
use splineop_cli::CliError;

#[derive(Parser)]
#[command(name = "splineop", version, about = "Spline neural operator surrogates for safety and recovery probabilities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory from a generator config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes history, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid output with soft initial and boundary penalties.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Error metrics on the held-out records of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the predicted probability field for one system.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time Monte Carlo, finite differences and the trained surrogate.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// L2 projection residuals of reference functions.
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let data = commands::gen_data(&config, seed, &out)?;
            println!("wrote {} records to {}", data.records.len(), out.display());
        }
        Command::Train { config, dataset, out, checkpoint, baseline, seed } => {
            let s = commands::train(TrainArgs {
                config: &config,
                dataset: &dataset,
                out: &out,
                checkpoint: checkpoint.as_deref(),
                baseline,
                seed,
            })?;
            println!("trained {} epochs in {:.1}s, best epoch {}, final loss {:e}", s.epochs, s.train_seconds, s.best_epoch, s.final_loss);
        }
        Command::Eval { checkpoint, dataset, out } => {
            let m = commands::eval(&checkpoint, &dataset, &out)?;
            println!("mse {:e} mae {:e} rel_err {:e} over {} points", m.mse, m.mae, m.rel_err, m.count);
        }
        Command::Predict { checkpoint, config, out } => {
            let v = commands::predict(&checkpoint, &config, &out)?;
            println!("wrote {} values to {}", v.len(), out.display());
        }
        Command::Benchmark { config, checkpoint, out, seed } => {
            let r = commands::benchmark(&config, &checkpoint, &out, seed)?;
            let star = |c: Option<u64>| c.map_or("inf".to_string(), |v| v.to_string());
            println!(
                "{} systems: mc {:.3}s pde {:.3}s neso {:.3}s; n* vs mc {}, vs pde {}",
                r.systems,
                r.mc_seconds,
                r.pde_seconds,
                r.neso_seconds,
                star(r.crossover_mc),
                star(r.crossover_pde)
            );
        }
        Command::Project { config, out } => {
            for (l, r) in commands::project(&config, &out)? {
                println!("{l} {r:e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.tag(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
