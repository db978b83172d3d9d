//! Command-line front end for the longitudinal targeted-learning toolkit:
//! estimation on real data, the Monte Carlo scenario study, effect
//! calibration, dataset generation, and report re-rendering, all driven by a
//! versioned TOML configuration with flag overrides.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 calibration failure. Errors additionally emit one JSON object
//! on stderr for machine consumption.

mod artifacts;
mod calibrate;
mod config;
mod error;
mod estimate;
mod generate;
mod report;
mod simulate;
mod tables;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "longtmle",
    version = artifacts::TOOL_VERSION,
    about = "Longitudinal targeted-learning estimators with cluster-aware inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate regimen means and contrasts from a longitudinal dataset
    Estimate(estimate::Flags),
    /// Run Monte Carlo scenarios and summarize bias, SE, rMSE, and coverage
    Simulate(simulate::Flags),
    /// Solve the generating process's exposure effect for a target contrast
    Calibrate(calibrate::Flags),
    /// Re-render the tables from an existing output directory
    Report(report::Flags),
    /// Write one simulated dataset as canonical wide CSV
    Generate(generate::Flags),
}

fn main() -> ExitCode {
    // Die quietly when a downstream pager closes the pipe instead of
    // panicking mid-table.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Estimate(flags) => estimate::run(flags),
        Cmd::Simulate(flags) => simulate::run(flags),
        Cmd::Calibrate(flags) => calibrate::run(flags),
        Cmd::Report(flags) => report::run(flags),
        Cmd::Generate(flags) => generate::run(flags),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let machine = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.message() }
            });
            eprintln!("{machine}");
            ExitCode::from(e.exit_code())
        }
    }
}
