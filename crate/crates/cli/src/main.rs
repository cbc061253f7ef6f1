//! `leakmarket`: solve, audit, simulate and sweep data-acquisition mechanisms from a JSON
//! market configuration.
//!
//! Exit codes: 0 ok, 1 internal error, 2 config error, 3 infeasible budget,
//! 4 audit failure, 5 regime error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use leakmarket_core::LeakError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Solve the mechanism; writes mechanism.json, allocation.csv and payment.csv.
    Solve,
    /// Solve and audit truthfulness, participation, budget and the envelope identity.
    Audit,
    /// Monte Carlo replay against the worst-case adversary.
    Simulate,
    /// Re-solve along one parameter axis and test the comparative statics.
    Sweep,
    /// Evaluate both full-participation conditions on a rate grid.
    CheckFullParticipation,
    /// Compare the continuous allocation with discrete solutions at K = 10, 100, 1000.
    Oracle,
}

#[derive(Debug, Parser)]
#[command(name = "leakmarket", version, about = "Data acquisition mechanisms under privacy leakage")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Market configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Sweep axis: budget, alpha_intra, alpha_inter or theta_i.
    #[arg(long)]
    pub axis: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub from: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub to: Option<f64>,
    /// Sweep points, or rates per group for check-full-participation.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Group whose parameter is swept.
    #[arg(long, default_value_t = 0)]
    pub group: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte Carlo replications.
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_AUDIT: u8 = 4;
pub const EXIT_REGIME: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<LeakError>() {
        Some(LeakError::Config { .. } | LeakError::Domain(_)) => EXIT_CONFIG,
        Some(LeakError::Infeasible { .. }) => EXIT_INFEASIBLE,
        Some(LeakError::Regime(_) | LeakError::Regularity { .. } | LeakError::Precondition(_)) => EXIT_REGIME,
        _ => EXIT_INTERNAL,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("audit failed; see the reports in {}", cli.out.display());
            ExitCode::from(EXIT_AUDIT)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
