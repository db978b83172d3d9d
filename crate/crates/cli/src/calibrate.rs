//! `calibrate`: solve the generating process's exposure coefficient so the
//! true always-versus-never contrast hits a target, and freeze the result.
//!
//! Output: `calibrated.toml`, a config carrying the solved `[dgp]` section
//! and a `[calibration]` stamp, with the oracle value and its Monte Carlo
//! standard error embedded as comments. Feeding that file back through
//! `--config` verifies the frozen value instead of searching again.

use std::path::PathBuf;

use longtmle::sim::{
    calibrate, oracle_contrast, DgpConfig, CALIBRATION_N_MC, CALIBRATION_SEED, TARGET_DELTA,
    TARGET_DELTA_TOL,
};
use longtmle::Regimen;

use crate::artifacts::OutDir;
use crate::config::{self, CalibrateSection, CalibrationStamp, FileConfig, OutputSection};
use crate::error::{usage, CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Flags {
    /// TOML run configuration; a `[calibration]` stamp next to `[dgp]`
    /// switches to verification of the frozen value
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for the common-random-number oracle draws
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Worker threads for the Monte Carlo oracle; 0 = all cores
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Output directory; must not already exist
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(flags: Flags) -> CliResult<()> {
    let file = FileConfig::load(flags.config.as_deref())?;
    let mut section = file.calibrate.clone().unwrap_or_default();
    if let Some(s) = flags.seed {
        section.seed = Some(s);
    }
    let workers = config::init_workers(flags.workers, file.output.as_ref());
    let out = config::resolve_out(flags.out.as_deref(), file.output.as_ref())?;

    let base = file.dgp.clone().unwrap_or_else(DgpConfig::study_default);
    base.validate().map_err(|e| usage(format!("[dgp]: {e}")))?;
    let target = section.target.unwrap_or(TARGET_DELTA);
    let tol = section.tol.unwrap_or(TARGET_DELTA_TOL);
    let draws = section.draws.unwrap_or(CALIBRATION_N_MC);
    let seed = section.seed.unwrap_or(CALIBRATION_SEED);

    let outdir = OutDir::create(&out)?;
    let (solved, stamp) = match file.calibration {
        Some(frozen) => {
            // Frozen config: re-evaluate the oracle at the stored settings
            // and accept or reject without searching.
            let est = oracle_contrast(
                &base,
                &Regimen::always(base.visits),
                &Regimen::never(base.visits),
                frozen.draws,
                frozen.seed,
            )?;
            if (est.value - frozen.target).abs() > frozen.tol {
                return Err(CliError::Calibration(format!(
                    "frozen configuration yields contrast {} (mc se {}), outside {} +/- {}",
                    est.value, est.mc_se, frozen.target, frozen.tol
                )));
            }
            println!(
                "Verified frozen calibration: exposure {} gives contrast {} (mc se {})",
                base.coefficients.exposure, est.value, est.mc_se
            );
            (
                base.clone(),
                CalibrationStamp {
                    target: frozen.target,
                    tol: frozen.tol,
                    value: est.value,
                    mc_se: est.mc_se,
                    draws: frozen.draws,
                    seed: frozen.seed,
                },
            )
        }
        None => {
            let cal = calibrate(&base, target, tol, draws, seed)?;
            for step in &cal.trace {
                println!(
                    "  exposure {:>13.8} -> contrast {:>12.8}",
                    step.exposure, step.delta
                );
            }
            println!(
                "Calibrated: exposure {} gives contrast {} (mc se {})",
                cal.config.coefficients.exposure, cal.delta.value, cal.delta.mc_se
            );
            let stamp = CalibrationStamp {
                target,
                tol,
                value: cal.delta.value,
                mc_se: cal.delta.mc_se,
                draws,
                seed,
            };
            (cal.config, stamp)
        }
    };

    let frozen = FileConfig {
        config_version: Some(config::CONFIG_VERSION),
        calibration: Some(stamp),
        dgp: Some(solved.clone()),
        ..FileConfig::default()
    };
    let body = toml::to_string_pretty(&frozen)
        .map_err(|e| crate::error::runtime(format!("calibrated.toml: {e}")))?;
    let header = format!(
        "# Calibrated generating configuration.\n\
         # True always-vs-never contrast {} (MC se {}) over {} paired draws, seed {}.\n\
         # Target {} within +/- {}.\n",
        stamp.value, stamp.mc_se, stamp.draws, stamp.seed, stamp.target, stamp.tol
    );
    outdir.write("calibrated.toml", format!("{header}{body}"))?;

    let resolved = FileConfig {
        calibrate: Some(CalibrateSection {
            target: Some(stamp.target),
            tol: Some(stamp.tol),
            draws: Some(stamp.draws),
            seed: Some(stamp.seed),
        }),
        dgp: Some(solved),
        output: Some(OutputSection {
            dir: Some(out.display().to_string()),
            workers: Some(workers),
        }),
        ..FileConfig::default()
    };
    outdir.write_resolved_config("calibrate", &resolved)?;
    let published = outdir.publish()?;
    println!("Frozen configuration written to {}", published.join("calibrated.toml").display());
    Ok(())
}
