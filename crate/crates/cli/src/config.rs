//! Run configuration: one TOML file with typed sections, merged with
//! command-line flags. Precedence is built-in defaults, then the file, then
//! flags; the fully resolved result is written into every output directory
//! so a run can be repeated from its artifacts alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use longtmle::sim::{DgpConfig, MethodKind, OracleEstimate, Scenario, METHOD_KEYS, SCENARIO_KEYS};

use crate::error::{usage, CliResult};

/// Understood `config_version`; files declaring a newer one are rejected.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<CalibrateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationStamp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

/// Written by the tool into resolved configs; accepted and ignored on input
/// so artifacts can be fed back as `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    /// Input dataset CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    /// `wide` (one row per subject) or `long` (one row per subject-visit).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// Optional column-name mapping file of `canonical = column` lines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_incomplete_baseline: Option<bool>,
    /// Method keys; defaults to every method.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    /// Regimens as comma-separated exposure decisions, e.g. `"1,1"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regimens: Option<Vec<String>>,
    /// Pairs of regimens whose difference is reported, minuend first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrasts: Option<Vec<Vec<String>>>,
    /// `count_sum` (outcome is the running infection count) or `direct`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_form: Option<String>,
    /// `subset` (follower-only regressions) or `pooled`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<String>,
    /// Floor for the cumulative propensity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
    /// Cluster-bootstrap replicates behind G-computation intervals.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Scenario keys; defaults to all four.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Monte Carlo draws for a fresh oracle when `truth` is absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_draws: Option<u64>,
    /// Pinned true contrast; skips the oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<OracleEstimate>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    /// True always-vs-never contrast to aim for.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Stamp a finished calibration leaves in its output; a config carrying one
/// next to a `[dgp]` section is treated as frozen and only re-verified.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationStamp {
    pub target: f64,
    pub tol: f64,
    /// Oracle contrast at the calibrated exposure coefficient.
    pub value: f64,
    pub mc_se: f64,
    pub draws: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Worker threads for replicate-level parallelism; 0 = all cores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        if let Some(v) = cfg.config_version {
            if v > CONFIG_VERSION {
                return Err(usage(format!(
                    "config {} declares config_version {v}; this build understands \
                     {CONFIG_VERSION}",
                    path.display()
                )));
            }
        }
        Ok(cfg)
    }
}

/// Splits repeatable flag values on commas, trimming blanks, so
/// `--method a,b --method c` and `--method a --method b --method c` agree.
pub fn split_list(values: &[String]) -> Vec<String> {
    values
        .iter()
        .flat_map(|v| v.split(','))
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect()
}

pub fn parse_methods(keys: &[String]) -> CliResult<Vec<MethodKind>> {
    let mut out = Vec::new();
    for key in keys {
        if key == "all" {
            for mk in MethodKind::all() {
                if !out.contains(&mk) {
                    out.push(mk);
                }
            }
            continue;
        }
        let mk = MethodKind::parse(key).map_err(|_| {
            usage(format!(
                "unknown method {key:?}; valid: {}",
                METHOD_KEYS.join(", ")
            ))
        })?;
        if out.contains(&mk) {
            return Err(usage(format!("method {key:?} requested twice")));
        }
        out.push(mk);
    }
    if out.is_empty() {
        return Err(usage("no methods requested"));
    }
    Ok(out)
}

pub fn parse_scenarios(keys: &[String]) -> CliResult<Vec<Scenario>> {
    let mut out = Vec::new();
    for key in keys {
        if key == "all" {
            for sc in Scenario::all() {
                if !out.contains(&sc) {
                    out.push(sc);
                }
            }
            continue;
        }
        let sc = Scenario::parse(key).map_err(|_| {
            usage(format!(
                "unknown scenario {key:?}; valid: {}",
                SCENARIO_KEYS.join(", ")
            ))
        })?;
        if out.contains(&sc) {
            return Err(usage(format!("scenario {key:?} requested twice")));
        }
        out.push(sc);
    }
    if out.is_empty() {
        return Err(usage("no scenarios requested"));
    }
    Ok(out)
}

/// Resolves the output directory: the `--out` flag wins over `[output] dir`.
pub fn resolve_out(
    flag: Option<&Path>,
    section: Option<&OutputSection>,
) -> CliResult<std::path::PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(dir) = section.and_then(|s| s.dir.as_deref()) {
        return Ok(dir.into());
    }
    Err(usage("no output directory: pass --out or set [output] dir"))
}

/// Worker threads for replicate-level parallelism: the flag wins over
/// `[output] workers`; 0 or absent keeps rayon's default (all cores).
/// Returns the resolved count for the resolved-config record.
pub fn init_workers(flag: Option<usize>, section: Option<&OutputSection>) -> usize {
    let n = flag.or(section.and_then(|s| s.workers)).unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    n
}
