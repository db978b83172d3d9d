//! `generate`: draw one dataset from the generating process and write it in
//! the canonical wide CSV layout, ready for `estimate --data`.

use std::path::PathBuf;

use longtmle::io::write_dataset;
use longtmle::sim::{generate_dataset, DgpConfig};

use crate::artifacts::OutDir;
use crate::config::{self, FileConfig, GenerateSection, OutputSection};
use crate::error::{usage, CliResult};

#[derive(Debug, clap::Args)]
pub struct Flags {
    /// TOML run configuration; `[dgp]` overrides the study defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Generation seed
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Output directory; must not already exist
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(flags: Flags) -> CliResult<()> {
    let file = FileConfig::load(flags.config.as_deref())?;
    let mut section = file.generate.clone().unwrap_or_default();
    if let Some(s) = flags.seed {
        section.seed = Some(s);
    }
    let out = config::resolve_out(flags.out.as_deref(), file.output.as_ref())?;

    let dgp = file.dgp.clone().unwrap_or_else(DgpConfig::study_default);
    dgp.validate().map_err(|e| usage(format!("[dgp]: {e}")))?;
    let seed = section.seed.unwrap_or(1);

    let d = generate_dataset(&dgp, seed)?;
    let outdir = OutDir::create(&out)?;
    write_dataset(&outdir.path().join("dataset.csv"), &d)?;
    let resolved = FileConfig {
        generate: Some(GenerateSection { seed: Some(seed) }),
        dgp: Some(dgp),
        output: Some(OutputSection {
            dir: Some(out.display().to_string()),
            workers: Some(0),
        }),
        ..FileConfig::default()
    };
    outdir.write_resolved_config("generate", &resolved)?;
    let published = outdir.publish()?;
    println!(
        "Wrote {} subjects in {} clusters over {} visits to {}",
        d.n(),
        d.n_clusters(),
        d.k(),
        published.join("dataset.csv").display()
    );
    Ok(())
}
