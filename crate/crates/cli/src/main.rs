//! `omni`: seeded training runs, evaluation protocols, mode comparisons and
//! gradient checks for the tri-flow few-shot learning workspace.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use omni_cli::commands::{
    cmd_compare, cmd_eval, cmd_gradcheck, cmd_train, error_exit_code, EXIT_CHECK,
};
use omni_cli::config::load_experiment;

#[derive(Parser)]
#[command(name = "omni", about = "Tri-flow few-shot learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint and manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Dotted-path config overrides, e.g. --override run.iterations=100
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint under a protocol; writes report.json/report.dat.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["regression", "rl", "classification"])]
        protocol: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train and evaluate all five modes under shared seeds.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the registered finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let cfg = load_experiment(config.as_deref(), &overrides, seed)?;
            let result = cmd_train(&cfg, &out)?;
            println!(
                "trained {} on {} for {} iterations -> {}",
                cfg.train.mode.name(),
                cfg.train.family.name(),
                cfg.train.iterations,
                result.dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            protocol,
            config,
            seed,
            out,
            overrides,
        } => {
            let cfg = load_experiment(config.as_deref(), &overrides, seed)?;
            let report = cmd_eval(&checkpoint, &protocol, &cfg, &out)?;
            println!(
                "evaluated {} over {} tasks -> {}",
                report.protocol,
                report.n_tasks,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            config,
            seeds,
            out,
            overrides,
        } => {
            let cfg = load_experiment(config.as_deref(), &overrides, None)?;
            let rows = cmd_compare(&cfg, &seeds, &out)?;
            println!("{:<16} {:>14} {:>12}  status", "mode", "metric", "stderr");
            for row in &rows {
                println!(
                    "{:<16} {:>14.6} {:>12.6}  {}",
                    row.mode.name(),
                    row.mean,
                    row.stderr,
                    row.status
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { scope, points } => {
            let ok = cmd_gradcheck(&scope, points)?;
            if ok {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_CHECK as u8))
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(error_exit_code(&err) as u8)
        }
    }
}
