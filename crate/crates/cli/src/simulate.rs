//! `simulate`: run the Monte Carlo scenario study and report bias, average
//! standard error, root mean squared error, and interval coverage per
//! method, scenario by scenario.
//!
//! Outputs per scenario: `scenario_<key>.csv` (summary rows) and
//! `scenario_<key>_replicates.csv` (per-replicate estimates for audit),
//! plus `resolved_config.toml`.

use std::path::PathBuf;

use longtmle::derive_seed;
use longtmle::sim::{
    oracle_contrast, run_scenario, DgpConfig, ScenarioConfig,
};
use longtmle::Regimen;

use crate::artifacts::OutDir;
use crate::config::{self, FileConfig, OutputSection, SimulateSection};
use crate::error::{usage, CliResult};

#[derive(Debug, clap::Args)]
pub struct Flags {
    /// TOML run configuration; flags override its keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Scenario keys, comma separated or repeated; `all` selects every one
    #[arg(long = "scenario", value_name = "KEY")]
    pub scenarios: Vec<String>,
    /// Method keys, comma separated or repeated; `all` selects every method
    #[arg(long = "method", value_name = "KEY")]
    pub methods: Vec<String>,
    /// Monte Carlo replicates per scenario
    #[arg(long, value_name = "R")]
    pub reps: Option<usize>,
    /// Cluster-bootstrap replicates behind G-computation intervals
    #[arg(long, value_name = "B")]
    pub bootstrap: Option<usize>,
    /// Master seed; replicate r of every scenario sees the same data
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Worker threads for replicate-level parallelism; 0 = all cores
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Output directory; must not already exist
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(flags: Flags) -> CliResult<()> {
    let file = FileConfig::load(flags.config.as_deref())?;
    let mut section = file.simulate.clone().unwrap_or_default();

    let scenario_flags = config::split_list(&flags.scenarios);
    if !scenario_flags.is_empty() {
        section.scenarios = Some(scenario_flags);
    }
    let method_flags = config::split_list(&flags.methods);
    if !method_flags.is_empty() {
        section.methods = Some(method_flags);
    }
    if let Some(r) = flags.reps {
        section.reps = Some(r);
    }
    if let Some(b) = flags.bootstrap {
        section.bootstrap = Some(b);
    }
    if let Some(s) = flags.seed {
        section.seed = Some(s);
    }

    let workers = config::init_workers(flags.workers, file.output.as_ref());
    let out = config::resolve_out(flags.out.as_deref(), file.output.as_ref())?;

    let dgp = file.dgp.clone().unwrap_or_else(DgpConfig::study_default);
    dgp.validate().map_err(|e| usage(format!("[dgp]: {e}")))?;
    let scenarios = config::parse_scenarios(
        &section
            .scenarios
            .clone()
            .unwrap_or_else(|| vec!["all".to_string()]),
    )?;
    let methods = config::parse_methods(
        &section
            .methods
            .clone()
            .unwrap_or_else(|| vec!["all".to_string()]),
    )?;
    let reps = section.reps.unwrap_or(200);
    if reps == 0 {
        return Err(usage("reps must be positive"));
    }
    let bootstrap = section.bootstrap.unwrap_or(200);
    let seed = section.seed.unwrap_or(1);
    let oracle_draws = section.oracle_draws.unwrap_or(1_000_000);

    // The true contrast is shared across scenarios (they re-dress the same
    // generating process), so resolve it once up front.
    let truth = match section.truth {
        Some(t) => t,
        None => oracle_contrast(
            &dgp,
            &Regimen::always(dgp.visits),
            &Regimen::never(dgp.visits),
            oracle_draws,
            derive_seed(seed, 0xFACE),
        )?,
    };

    let outdir = OutDir::create(&out)?;
    for &scenario in &scenarios {
        let cfg = ScenarioConfig {
            dgp: dgp.clone(),
            scenario,
            methods: methods.clone(),
            reps,
            bootstrap,
            seed,
            truth: Some(truth),
            oracle_draws,
        };
        let res = run_scenario(&cfg)?;
        outdir.write(&format!("scenario_{}.csv", scenario.key()), res.summary_csv())?;
        outdir.write(
            &format!("scenario_{}_replicates.csv", scenario.key()),
            res.replicates_csv(),
        )?;
        println!("{}", res.table());
    }

    let resolved = FileConfig {
        simulate: Some(SimulateSection {
            scenarios: Some(scenarios.iter().map(|s| s.key().to_string()).collect()),
            methods: Some(methods.iter().map(|m| m.key().to_string()).collect()),
            reps: Some(reps),
            bootstrap: Some(bootstrap),
            seed: Some(seed),
            oracle_draws: Some(oracle_draws),
            truth: Some(truth),
        }),
        dgp: Some(dgp),
        output: Some(OutputSection {
            dir: Some(out.display().to_string()),
            workers: Some(workers),
        }),
        ..FileConfig::default()
    };
    outdir.write_resolved_config("simulate", &resolved)?;
    let published = outdir.publish()?;
    println!("Reports written to {}", published.display());
    Ok(())
}
