//! `report`: re-render the tables from an existing output directory, reading
//! only its CSV artifacts. Useful after a long simulation whose terminal
//! output has scrolled away, and as a check that the CSVs are self-sufficient.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use longtmle::sim::{MethodKind, Scenario};

use crate::config::FileConfig;
use crate::error::{runtime, usage, CliResult};
use crate::tables::{estimate_block, EstimateRow, INTERVAL_FOOTNOTE};

#[derive(Debug, clap::Args)]
pub struct Flags {
    /// Output directory of a previous estimate or simulate run
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn run(flags: Flags) -> CliResult<()> {
    let dir = &flags.out;
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    if let Some(line) = provenance_line(dir) {
        println!("{line}");
        println!();
    }
    let mut printed = false;

    let estimates = dir.join("estimates.csv");
    if estimates.is_file() {
        print_estimates(&estimates)?;
        printed = true;
    }

    let mut scenario_files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| {
                    n.starts_with("scenario_")
                        && n.ends_with(".csv")
                        && !n.ends_with("_replicates.csv")
                })
        })
        .collect();
    scenario_files.sort();
    for path in &scenario_files {
        print_scenario(path)?;
        printed = true;
    }

    if !printed {
        return Err(usage(format!(
            "nothing to report in {}: no estimates.csv or scenario_*.csv",
            dir.display()
        )));
    }
    Ok(())
}

fn provenance_line(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join("resolved_config.toml")).ok()?;
    let cfg: FileConfig = toml::from_str(&text).ok()?;
    let p = cfg.provenance?;
    Some(format!(
        "Run: longtmle {} {}",
        p.version.as_deref().unwrap_or("unknown"),
        p.command.as_deref().unwrap_or("")
    ))
}

fn parse_num(field: &str) -> f64 {
    if field.is_empty() || field == "NA" {
        f64::NAN
    } else {
        field.parse().unwrap_or(f64::NAN)
    }
}

fn read_rows(path: &Path) -> CliResult<(Vec<String>, Vec<BTreeMap<String, String>>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        rows.push(
            headers
                .iter()
                .cloned()
                .zip(record.iter().map(String::from))
                .collect(),
        );
    }
    Ok((headers, rows))
}

fn require<'a>(
    row: &'a BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> CliResult<&'a str> {
    row.get(key)
        .map(String::as_str)
        .ok_or_else(|| runtime(format!("{} lacks a {key} column", path.display())))
}

fn print_estimates(path: &Path) -> CliResult<()> {
    let (_, rows) = read_rows(path)?;
    let mut grouped: Vec<(String, Vec<EstimateRow>)> = Vec::new();
    for row in &rows {
        let method_key = require(row, "method", path)?;
        let label = MethodKind::parse(method_key)
            .map(|m| m.label().to_string())
            .unwrap_or_else(|_| method_key.to_string());
        let target = require(row, "target", path)?.to_string();
        let entry = EstimateRow {
            method_label: label,
            estimate: parse_num(require(row, "estimate", path)?),
            se: parse_num(require(row, "se", path)?),
            ci: (
                parse_num(require(row, "ci_lo", path)?),
                parse_num(require(row, "ci_hi", path)?),
            ),
        };
        match grouped.iter_mut().find(|(t, _)| *t == target) {
            Some((_, v)) => v.push(entry),
            None => grouped.push((target, vec![entry])),
        }
    }
    for (target, block) in &grouped {
        println!("{}", estimate_block(target, block));
    }
    println!("{INTERVAL_FOOTNOTE}");
    Ok(())
}

fn print_scenario(path: &Path) -> CliResult<()> {
    let (_, rows) = read_rows(path)?;
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let key = require(first, "scenario", path)?;
    let label = Scenario::parse(key)
        .map(|s| s.label().to_string())
        .unwrap_or_else(|_| key.to_string());
    let truth = parse_num(require(first, "truth", path)?);
    let truth_mc_se = parse_num(require(first, "truth_mc_se", path)?);
    let reps = rows
        .iter()
        .map(|r| {
            parse_num(r.get("reps_used").map_or("", String::as_str)) as usize
                + parse_num(r.get("failures").map_or("", String::as_str)) as usize
        })
        .max()
        .unwrap_or(0);
    println!(
        "Scenario: {label}   truth = {truth:.4} (mc se {truth_mc_se:.5})   replicates = {reps}"
    );
    println!(
        "{:<22} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "Method", "Estimate", "%bias", "SE", "rMSE", "Coverage"
    );
    for row in &rows {
        let label = require(row, "label", path)?;
        let coverage = require(row, "coverage", path)?;
        let coverage = if coverage == "NA" || coverage.is_empty() {
            "NA".to_string()
        } else {
            format!("{:.1}", parse_num(coverage))
        };
        println!(
            "{:<22} {:>9.3} {:>9.1} {:>9.3} {:>9.3} {:>9}",
            label,
            parse_num(require(row, "estimate", path)?),
            parse_num(require(row, "pct_bias", path)?),
            parse_num(require(row, "se", path)?),
            parse_num(require(row, "rmse", path)?),
            coverage
        );
    }
    println!();
    Ok(())
}
