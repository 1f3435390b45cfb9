//! `prom`: simulate cohorts, fit the induction-outcome model, and emit the
//! data behind every summary (forest plots, posterior predictive
//! histograms, naive baselines) as plain files.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 numerical failure.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;

use commands::{BaselineArgs, FitArgs, PpcArgs, SimulateArgs, SummarizeArgs};

#[derive(Parser, Debug)]
#[command(name = "prom", version, about = "Bayesian analysis of labor induction after PROM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with known ground truth.
    Simulate(SimulateArgs),
    /// Run NUTS on a cohort and write draws, diagnostics and imputations.
    Fit(FitArgs),
    /// Forest-plot table (mean, HDR, significance) for every coefficient.
    Summarize(SummarizeArgs),
    /// Posterior predictive histograms for all six channels.
    Ppc(PpcArgs),
    /// Unadjusted PIT vs MISO comparisons.
    Baseline(BaselineArgs),
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(e) => write!(f, "{e:#}"),
            Failure::Numeric(e) => write!(f, "numerical failure: {e:#}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Summarize(a) => commands::summarize(a),
        Command::Ppc(a) => commands::ppc(a),
        Command::Baseline(a) => commands::baseline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
