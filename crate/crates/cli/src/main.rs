//! `ellip-lrt`: fit elliptical regression models, test hypotheses with
//! adjusted likelihood ratio statistics, and run null-rejection studies.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure.

mod commands;
mod data;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{DiscrepancyArgs, FitArgs, SimulateArgs, TestArgs};

#[derive(Debug, Parser)]
#[command(name = "ellip-lrt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Maximum likelihood fit; writes estimates, standard errors and convergence.
    Fit(FitArgs),
    /// Likelihood ratio test with the adjusted statistics.
    Test(TestArgs),
    /// Seeded null-rejection study.
    Simulate(SimulateArgs),
    /// Relative p-value discrepancy of one statistic.
    Discrepancy(DiscrepancyArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Fit(a) => commands::cmd_fit(a),
        Command::Test(a) => commands::cmd_test(a),
        Command::Simulate(a) => commands::cmd_simulate(a),
        Command::Discrepancy(a) => commands::cmd_discrepancy(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
