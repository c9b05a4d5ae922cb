mod commands;
mod run;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::{AblateArgs, BenchArgs, EvalArgs, GenerateArgs, PredictArgs, TrainArgs};

/// Train, evaluate and inspect VMRNN spatiotemporal forecasting models.
#[derive(Debug, Parser)]
#[command(name = "vmrnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints and a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted frames as PGM/PPM images plus per-frame metrics.
    Predict(PredictArgs),
    /// Print parameter and FLOP counts, optionally timing a rollout.
    Bench(BenchArgs),
    /// Sweep one architecture axis and print a comparison table.
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Bench(a) => commands::bench(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for configuration problems, 2 for everything that failed at run time.
fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| matches!(c.downcast_ref::<vmrnn::Error>(), Some(vmrnn::Error::Config(_))));
    if config {
        1
    } else {
        2
    }
}
