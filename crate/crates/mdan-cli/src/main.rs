//! `mdan`: command-line front end for the mixup domain adaptation toolkit.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 training
//! divergence, 3 I/O or data-format error.

mod config;
mod plot;
mod prepare;
mod report;
mod runner;
mod sweep;
mod train;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mdan",
    version,
    about = "Mixup-based unsupervised domain adaptation for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Window and normalize raw data; write summaries and artifacts.
    Prepare(prepare::PrepareArgs),
    /// Train one scenario over one or more seeds.
    Train(train::TrainArgs),
    /// Run a grid of scenarios x ablations x seeds.
    Sweep(sweep::SweepArgs),
    /// Plot curves and KL tables from finished runs.
    Report(report::ReportArgs),
}

fn exit_code(e: &mdan::Error) -> i32 {
    use mdan::Error::*;
    match e {
        Config(_) | Shape(_) | Empty(_) | SchedulerExhausted { .. } => 1,
        Divergence { .. } => 2,
        Io { .. } | Parse { .. } | Checkpoint(_) => 3,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Prepare(args) => prepare::cmd_prepare(args),
        Command::Train(args) => train::cmd_train(args),
        Command::Sweep(args) => sweep::cmd_sweep(args),
        Command::Report(args) => report::cmd_report(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
