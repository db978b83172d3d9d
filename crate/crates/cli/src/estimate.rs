//! `estimate`: apply the requested estimators to one longitudinal dataset
//! and report regimen means and contrasts with cluster-aware intervals.
//!
//! Outputs: `estimates.csv` (full precision), `diagnostics.json` (per-fit
//! diagnostics keyed by method and target), and `resolved_config.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use longtmle::data::impute_after_censoring;
use longtmle::derive_seed;
use longtmle::estimators::{contrast, Conditioning, Estimate, EstimatorOptions, OutcomeForm};
use longtmle::io::{load_dataset, LoadOptions, Schema};
use longtmle::sim::{apply_method, MethodKind};
use longtmle::Regimen;

use crate::artifacts::OutDir;
use crate::config::{self, EstimateSection, FileConfig, OutputSection};
use crate::error::{usage, CliResult};
use crate::tables::{estimate_block, EstimateRow, INTERVAL_FOOTNOTE};

#[derive(Debug, clap::Args)]
pub struct Flags {
    /// TOML run configuration; flags override its keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Input dataset CSV (overrides `[estimate] data`)
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Method keys, comma separated or repeated; `all` selects every method
    #[arg(long = "method", value_name = "KEY")]
    pub methods: Vec<String>,
    /// Regimen of exposure decisions such as `1,1`; repeatable
    #[arg(long = "regimen", value_name = "A")]
    pub regimens: Vec<String>,
    /// Contrast of two regimens, minuend first, e.g. `1,1:0,0`; repeatable
    #[arg(long = "contrast", value_name = "A:B")]
    pub contrasts: Vec<String>,
    /// Cluster-bootstrap replicates behind G-computation intervals
    #[arg(long, value_name = "B")]
    pub bootstrap: Option<usize>,
    /// Master seed for bootstrap resampling and cross-validation folds
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections; 0 = all cores
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Output directory; must not already exist
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(flags: Flags) -> CliResult<()> {
    let file = FileConfig::load(flags.config.as_deref())?;
    let mut section = file.estimate.clone().unwrap_or_default();

    if let Some(data) = &flags.data {
        section.data = Some(data.display().to_string());
    }
    let method_flags = config::split_list(&flags.methods);
    if !method_flags.is_empty() {
        section.methods = Some(method_flags);
    }
    if !flags.regimens.is_empty() {
        section.regimens = Some(flags.regimens.clone());
    }
    if !flags.contrasts.is_empty() {
        let pairs = flags
            .contrasts
            .iter()
            .map(|c| parse_contrast_flag(c))
            .collect::<CliResult<Vec<_>>>()?;
        section.contrasts = Some(pairs);
    }
    if let Some(b) = flags.bootstrap {
        section.bootstrap = Some(b);
    }
    if let Some(s) = flags.seed {
        section.seed = Some(s);
    }

    let workers = config::init_workers(flags.workers, file.output.as_ref());
    let out = config::resolve_out(flags.out.as_deref(), file.output.as_ref())?;
    execute(section, out, workers)
}

/// Splits `--contrast A:B` into its two regimen strings.
fn parse_contrast_flag(raw: &str) -> CliResult<Vec<String>> {
    let parts: Vec<&str> = raw.split(':').map(str::trim).collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!(
            "contrast {raw:?} must name two regimens separated by a colon, e.g. 1,1:0,0"
        )));
    }
    Ok(parts.into_iter().map(String::from).collect())
}

struct ResultRow {
    method: MethodKind,
    target: String,
    estimate: Estimate,
}

fn execute(section: EstimateSection, out: PathBuf, workers: usize) -> CliResult<()> {
    let data_path = section
        .data
        .clone()
        .ok_or_else(|| usage("no input dataset: pass --data or set [estimate] data"))?;
    let format = section.format.clone().unwrap_or_else(|| "wide".to_string());
    let long = match format.as_str() {
        "wide" => false,
        "long" => true,
        other => return Err(usage(format!("format {other:?} is not wide or long"))),
    };
    let schema = match &section.schema {
        Some(p) => Schema::load(Path::new(p))
            .map_err(|e| usage(format!("schema {p}: {e}")))?,
        None => Schema::identity(),
    };
    let drop_incomplete = section.drop_incomplete_baseline.unwrap_or(false);
    let methods = config::parse_methods(
        &section
            .methods
            .clone()
            .unwrap_or_else(|| vec!["all".to_string()]),
    )?;
    let outcome_form = match section.outcome_form.as_deref().unwrap_or("count_sum") {
        "count_sum" => OutcomeForm::CountSum,
        "direct" => OutcomeForm::Direct,
        other => {
            return Err(usage(format!(
                "outcome_form {other:?} is not count_sum or direct"
            )))
        }
    };
    let conditioning = match section.conditioning.as_deref().unwrap_or("subset") {
        "subset" => Conditioning::Subset,
        "pooled" => Conditioning::Pooled,
        other => {
            return Err(usage(format!(
                "conditioning {other:?} is not subset or pooled"
            )))
        }
    };
    let defaults = EstimatorOptions::default();
    let truncation = section.truncation.unwrap_or(defaults.truncation_floor);
    let bootstrap = section.bootstrap.unwrap_or(200);
    let seed = section.seed.unwrap_or(1);

    let loaded = load_dataset(
        Path::new(&data_path),
        &LoadOptions {
            schema,
            long,
            drop_incomplete_baseline: drop_incomplete,
        },
    )?;
    let was_canonical = loaded.dataset.is_canonical();
    let d = if was_canonical {
        loaded.dataset
    } else {
        impute_after_censoring(&loaded.dataset)
    };
    let k = d.k();

    let (regimens, contrast_pairs) = resolve_targets(&section, k)?;
    if !contrast_pairs.is_empty() && bootstrap < 2 && methods.iter().any(|m| !m.uses_wald()) {
        return Err(usage(
            "contrasts of G-computation estimates need bootstrap >= 2 \
             for the paired cluster bootstrap",
        ));
    }

    let mut rows: Vec<ResultRow> = Vec::new();
    for &mk in &methods {
        // Seeds derive from the method's canonical position, so adding or
        // reordering requested methods never changes another method's draws.
        let tag = MethodKind::all().iter().position(|m| *m == mk).unwrap() as u64;
        let opts = EstimatorOptions {
            truncation_floor: truncation,
            conditioning,
            bootstrap: if mk.uses_wald() { 0 } else { bootstrap },
            seed: derive_seed(seed, 1 + tag),
        };
        let mut per_regimen: Vec<Estimate> = Vec::new();
        for reg in &regimens {
            let est = apply_method(&d, reg, mk, outcome_form, &opts)?;
            rows.push(ResultRow {
                method: mk,
                target: reg.to_string(),
                estimate: est.clone(),
            });
            per_regimen.push(est);
        }
        for &(i, j) in &contrast_pairs {
            let diff = contrast(&per_regimen[i], &per_regimen[j], &d)?;
            rows.push(ResultRow {
                method: mk,
                target: format!("{} vs {}", regimens[i], regimens[j]),
                estimate: diff,
            });
        }
    }

    let outdir = OutDir::create(&out)?;
    outdir.write("estimates.csv", estimates_csv(&rows)?)?;
    outdir.write(
        "diagnostics.json",
        diagnostics_json(&rows, &d, was_canonical, loaded.dropped_subjects.len())?,
    )?;
    let resolved = FileConfig {
        estimate: Some(EstimateSection {
            data: Some(data_path.clone()),
            format: Some(format),
            schema: section.schema.clone(),
            drop_incomplete_baseline: Some(drop_incomplete),
            methods: Some(methods.iter().map(|m| m.key().to_string()).collect()),
            regimens: Some(regimens.iter().map(|r| r.to_string()).collect()),
            contrasts: Some(
                contrast_pairs
                    .iter()
                    .map(|&(i, j)| vec![regimens[i].to_string(), regimens[j].to_string()])
                    .collect(),
            ),
            outcome_form: Some(
                match outcome_form {
                    OutcomeForm::CountSum => "count_sum",
                    OutcomeForm::Direct => "direct",
                }
                .to_string(),
            ),
            conditioning: Some(
                match conditioning {
                    Conditioning::Subset => "subset",
                    Conditioning::Pooled => "pooled",
                }
                .to_string(),
            ),
            truncation: Some(truncation),
            bootstrap: Some(bootstrap),
            seed: Some(seed),
        }),
        output: Some(OutputSection {
            dir: Some(out.display().to_string()),
            workers: Some(workers),
        }),
        ..FileConfig::default()
    };
    outdir.write_resolved_config("estimate", &resolved)?;
    let published = outdir.publish()?;

    println!(
        "Estimates from {} ({} subjects, {} clusters, {} visits)",
        data_path,
        d.n(),
        d.n_clusters(),
        k
    );
    println!();
    for (target, block_rows) in group_by_target(&rows) {
        println!("{}", estimate_block(&target, &block_rows));
    }
    println!("{INTERVAL_FOOTNOTE}");
    println!("Report written to {}", published.display());
    Ok(())
}

/// Resolves the regimen list and contrast pairs. Contrast members are added
/// to the regimen list when absent; with nothing requested the defaults are
/// sustained exposure versus none, contrasted.
fn resolve_targets(
    section: &EstimateSection,
    k: usize,
) -> CliResult<(Vec<Regimen>, Vec<(usize, usize)>)> {
    let parse = |s: &str| -> CliResult<Regimen> {
        let r = Regimen::parse(s).map_err(|e| usage(format!("regimen {s:?}: {e}")))?;
        if r.len() != k - 1 {
            return Err(usage(format!(
                "regimen {s:?} has {} decision points; a dataset with {k} visits needs {}",
                r.len(),
                k - 1
            )));
        }
        Ok(r)
    };
    let mut regimens: Vec<Regimen> = Vec::new();
    let push_unique = |r: Regimen, regimens: &mut Vec<Regimen>| -> usize {
        match regimens.iter().position(|x| x.as_slice() == r.as_slice()) {
            Some(i) => i,
            None => {
                regimens.push(r);
                regimens.len() - 1
            }
        }
    };
    if let Some(strs) = &section.regimens {
        for s in strs {
            push_unique(parse(s)?, &mut regimens);
        }
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if let Some(list) = &section.contrasts {
        for pair in list {
            if pair.len() != 2 {
                return Err(usage(format!(
                    "contrast {pair:?} must name exactly two regimens"
                )));
            }
            let i = push_unique(parse(&pair[0])?, &mut regimens);
            let j = push_unique(parse(&pair[1])?, &mut regimens);
            if i == j {
                return Err(usage(format!(
                    "contrast {pair:?} compares a regimen with itself"
                )));
            }
            if pairs.contains(&(i, j)) {
                return Err(usage(format!("contrast {pair:?} requested twice")));
            }
            pairs.push((i, j));
        }
    }
    if regimens.is_empty() {
        regimens = vec![Regimen::always(k), Regimen::never(k)];
    }
    if section.contrasts.is_none() && regimens.len() == 2 {
        pairs = vec![(0, 1)];
    }
    Ok((regimens, pairs))
}

/// Interval construction actually behind an estimate's CI.
fn interval_label(est: &Estimate) -> &'static str {
    if est.ic.is_some() {
        "wald"
    } else if est.replicates.is_some() {
        "bootstrap_percentile"
    } else {
        "none"
    }
}

fn estimates_csv(rows: &[ResultRow]) -> CliResult<Vec<u8>> {
    let num = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| crate::error::runtime(format!("estimates.csv: {e}"));
    w.write_record(["method", "target", "estimate", "se", "ci_lo", "ci_hi", "interval"])
        .map_err(io_err)?;
    for row in rows {
        let r = &row.estimate.report;
        w.write_record([
            row.method.key().to_string(),
            row.target.clone(),
            num(r.psi),
            num(r.se),
            num(r.ci.0),
            num(r.ci.1),
            interval_label(&row.estimate).to_string(),
        ])
        .map_err(io_err)?;
    }
    w.into_inner()
        .map_err(|e| crate::error::runtime(format!("estimates.csv: {e}")))
}

fn diagnostics_json(
    rows: &[ResultRow],
    d: &longtmle::Dataset,
    was_canonical: bool,
    dropped: usize,
) -> CliResult<String> {
    let mut top: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    let mut dataset = BTreeMap::new();
    dataset.insert("subjects".to_string(), d.n() as f64);
    dataset.insert("clusters".to_string(), d.n_clusters() as f64);
    dataset.insert("visits".to_string(), d.k() as f64);
    dataset.insert("baseline_covariates".to_string(), d.p() as f64);
    dataset.insert(
        "canonicalized".to_string(),
        f64::from(!was_canonical),
    );
    dataset.insert("dropped_subjects".to_string(), dropped as f64);
    top.entry("_dataset".to_string())
        .or_default()
        .insert("input".to_string(), dataset);
    for row in rows {
        top.entry(row.method.key().to_string())
            .or_default()
            .insert(row.target.clone(), row.estimate.report.diagnostics.clone());
    }
    let mut text = serde_json::to_string_pretty(&top)
        .map_err(|e| crate::error::runtime(format!("diagnostics.json: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn group_by_target(rows: &[ResultRow]) -> Vec<(String, Vec<EstimateRow>)> {
    let mut grouped: Vec<(String, Vec<EstimateRow>)> = Vec::new();
    for row in rows {
        let r = &row.estimate.report;
        let entry = EstimateRow {
            method_label: row.method.label().to_string(),
            estimate: r.psi,
            se: r.se,
            ci: r.ci,
        };
        match grouped.iter_mut().find(|(t, _)| *t == row.target) {
            Some((_, v)) => v.push(entry),
            None => grouped.push((row.target.clone(), vec![entry])),
        }
    }
    grouped
}
