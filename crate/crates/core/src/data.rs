//! Subject records, exposure regimens, datasets, and outcome scaling.
//!
//! One record holds the full follow-up of one subject over `K` visits:
//! censoring indicators `c = (C_1, ..., C_K)`, time-varying covariates
//! `l = (L_1, ..., L_{K-1})`, exposures `a = (A_1, ..., A_{K-1})`, and the
//! count outcome `y` measured at visit `K`. Within a visit the order of
//! events is censoring, then covariate, then exposure; the outcome follows
//! `C_K`. Censoring and exposure are both monotone.
//!
//! Canonical form: every value that follows censoring is exactly zero. All
//! estimators require canonical datasets; [`impute_after_censoring`] produces
//! one from raw loaded data.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::error::{CoreError, Result};

/// Full observed history for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub subject_id: String,
    pub cluster_id: String,
    /// Baseline covariates, fixed length across a dataset.
    pub w: Vec<f64>,
    /// Censoring indicators, length `K`; true means censored at that visit.
    pub c: Vec<bool>,
    /// Time-varying binary covariate, length `K - 1`.
    pub l: Vec<bool>,
    /// Binary exposure, length `K - 1`.
    pub a: Vec<bool>,
    /// Count outcome observed at visit `K`; zero if censored there.
    pub y: u32,
}

impl LongitudinalRecord {
    /// Visit at which the subject was censored (1-based), if any.
    pub fn censoring_visit(&self) -> Option<usize> {
        self.c.iter().position(|&c| c).map(|i| i + 1)
    }

    fn validate(&self, k: usize) -> Result<()> {
        let id = &self.subject_id;
        if self.c.len() != k {
            return Err(CoreError::invalid_data(format!(
                "subject {id}: expected {k} censoring indicators, found {}",
                self.c.len()
            )));
        }
        if self.l.len() != k - 1 || self.a.len() != k - 1 {
            return Err(CoreError::invalid_data(format!(
                "subject {id}: expected {} covariate and exposure values, found {} and {}",
                k - 1,
                self.l.len(),
                self.a.len()
            )));
        }
        if self.c.windows(2).any(|p| p[0] && !p[1]) {
            return Err(CoreError::invalid_data(format!(
                "subject {id}: censoring is not monotone"
            )));
        }
        if self.a.windows(2).any(|p| !p[0] && p[1]) {
            return Err(CoreError::invalid_data(format!(
                "subject {id}: exposure restarts after stopping"
            )));
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid_data(format!(
                "subject {id}: non-finite baseline covariate"
            )));
        }
        Ok(())
    }

    fn is_canonical(&self) -> bool {
        let k = self.c.len();
        for t in 0..k - 1 {
            if self.c[t] && (self.l[t] || self.a[t]) {
                return false;
            }
        }
        !(self.c[k - 1] && self.y != 0)
    }
}

/// A fixed exposure regimen `(a_1, ..., a_{K-1})`; monotone like observed
/// exposure.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Regimen {
    a: Vec<bool>,
}

impl Regimen {
    pub fn new(a: Vec<bool>) -> Result<Self> {
        if a.is_empty() {
            return Err(CoreError::invalid_argument("regimen must not be empty"));
        }
        if a.windows(2).any(|p| !p[0] && p[1]) {
            return Err(CoreError::invalid_argument(
                "regimen is not monotone: exposure cannot restart after stopping",
            ));
        }
        Ok(Regimen { a })
    }

    /// Parses comma-separated zeros and ones, e.g. `"1,1,0"`.
    pub fn parse(s: &str) -> Result<Self> {
        let a = s
            .split(',')
            .map(|tok| match tok.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(CoreError::invalid_argument(format!(
                    "regimen component {other:?} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Regimen::new(a)
    }

    /// Sustained exposure over all `k - 1` decision points.
    pub fn always(k: usize) -> Self {
        Regimen {
            a: vec![true; k - 1],
        }
    }

    /// No exposure at any decision point.
    pub fn never(k: usize) -> Self {
        Regimen {
            a: vec![false; k - 1],
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Exposure level at decision point `j` (1-based).
    pub fn at(&self, j: usize) -> bool {
        self.a[j - 1]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.a
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.a.iter().map(|&a| if a { "1" } else { "0" }).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// A validated collection of records sharing the same number of visits.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<LongitudinalRecord>,
    k: usize,
    /// Cluster id -> record indices, in sorted cluster-id order.
    cluster_index: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    /// Validates records and builds the cluster index. The number of visits
    /// is taken from the first record.
    pub fn new(records: Vec<LongitudinalRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(CoreError::invalid_data("dataset contains no records"));
        }
        let k = records[0].c.len();
        if k < 2 {
            return Err(CoreError::invalid_data(
                "at least two visits are required (one exposure decision and the outcome visit)",
            ));
        }
        let p = records[0].w.len();
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate(k)?;
            if r.w.len() != p {
                return Err(CoreError::invalid_data(format!(
                    "subject {}: expected {p} baseline covariates, found {}",
                    r.subject_id,
                    r.w.len()
                )));
            }
            if !seen.insert(r.subject_id.as_str()) {
                return Err(CoreError::invalid_data(format!(
                    "duplicate subject id {}",
                    r.subject_id
                )));
            }
        }
        drop(seen);
        let mut cluster_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            cluster_index.entry(r.cluster_id.clone()).or_default().push(i);
        }
        Ok(Dataset {
            records,
            k,
            cluster_index,
        })
    }

    /// Rebuilds the cluster index without revalidating, for resamples whose
    /// records are clones of an already validated dataset.
    pub(crate) fn from_validated(records: Vec<LongitudinalRecord>, k: usize) -> Self {
        let mut cluster_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            cluster_index.entry(r.cluster_id.clone()).or_default().push(i);
        }
        Dataset {
            records,
            k,
            cluster_index,
        }
    }

    pub fn records(&self) -> &[LongitudinalRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Number of visits `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Baseline covariate dimension.
    pub fn p(&self) -> usize {
        self.records[0].w.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_index.len()
    }

    /// Record indices grouped by cluster, keyed in sorted cluster-id order.
    pub fn cluster_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.cluster_index
    }

    /// For each record, the ordinal of its cluster in sorted cluster-id
    /// order. Used for dummy coding and fold assignment.
    pub fn cluster_ordinals(&self) -> Vec<usize> {
        let mut ord = vec![0usize; self.records.len()];
        for (m, indices) in self.cluster_index.values().enumerate() {
            for &i in indices {
                ord[i] = m;
            }
        }
        ord
    }

    /// True when every post-censoring value is zero.
    pub fn is_canonical(&self) -> bool {
        self.records.iter().all(|r| r.is_canonical())
    }

    /// Errors unless the dataset is canonical; estimator entry guard.
    pub fn require_canonical(&self) -> Result<()> {
        for r in &self.records {
            if !r.is_canonical() {
                return Err(CoreError::invalid_data(format!(
                    "subject {}: post-censoring values are not zero-imputed; \
                     run impute_after_censoring first",
                    r.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// Zeroes every value that follows censoring: `l_t` and `a_t` at and after
/// the censoring visit, and `y` when the subject is censored at visit `K`.
/// Idempotent.
pub fn impute_after_censoring(d: &Dataset) -> Dataset {
    let k = d.k;
    let records = d
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for t in 0..k - 1 {
                if r.c[t] {
                    r.l[t] = false;
                    r.a[t] = false;
                }
            }
            if r.c[k - 1] {
                r.y = 0;
            }
            r
        })
        .collect();
    Dataset::new(records).expect("imputation preserves validity")
}

/// True when the subject is uncensored at visit `t` (1-based) and its
/// exposure matched the regimen at every decision point before `t`.
pub fn follows_regimen(r: &LongitudinalRecord, regimen: &Regimen, t: usize) -> Result<bool> {
    let k = r.c.len();
    if t == 0 || t > k {
        return Err(CoreError::invalid_argument(format!(
            "visit {t} out of range 1..={k}"
        )));
    }
    if regimen.len() != k - 1 {
        return Err(CoreError::invalid_argument(format!(
            "regimen has {} decision points, dataset has {}",
            regimen.len(),
            k - 1
        )));
    }
    if r.c[t - 1] {
        return Ok(false);
    }
    Ok(r.a[..t - 1] == regimen.as_slice()[..t - 1])
}

/// Affine map between the outcome scale and the unit interval used by the
/// sequential regressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeScaler {
    pub lo: f64,
    pub hi: f64,
}

impl OutcomeScaler {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(CoreError::invalid_argument(format!(
                "degenerate outcome range [{lo}, {hi}]"
            )));
        }
        Ok(OutcomeScaler { lo, hi })
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.lo) / (self.hi - self.lo)
    }

    pub fn unscale(&self, s: f64) -> f64 {
        self.lo + s * (self.hi - self.lo)
    }

    pub fn range(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Builds the scaler for a dataset: zero (the natural floor of a count) up
/// to the largest outcome observed among subjects uncensored at visit `K`.
/// Errors when nobody reaches visit `K` or every observed outcome is zero.
pub fn make_scaler(d: &Dataset) -> Result<OutcomeScaler> {
    let k = d.k();
    let mut hi: Option<u32> = None;
    for r in d.records() {
        if !r.c[k - 1] {
            hi = Some(hi.map_or(r.y, |h| h.max(r.y)));
        }
    }
    match hi {
        None => Err(CoreError::invalid_data(
            "cannot build outcome scaler: every subject is censored at the final visit",
        )),
        Some(0) => Err(CoreError::invalid_data(
            "cannot build outcome scaler: every observed outcome is zero",
        )),
        Some(h) => OutcomeScaler::new(0.0, f64::from(h)),
    }
}
