//! The four estimators of the counterfactual mean `psi = E(Y^a)` under a
//! fixed regimen with no censoring: likelihood G-computation, sequential
//! G-computation, stabilized IPTW, and TMLE, plus the shared propensity
//! machinery (cumulative products, clever covariates, fluctuation).
//!
//! All estimators require a canonical dataset (zero-imputed after
//! censoring). Time indices `t` are 1-based throughout, matching visits.
//!
//! Conditioning modes for the nested regressions and censoring models:
//! `Subset` fits each model among subjects whose observed exposure matched
//! the regimen so far, with `(l-history, w)` as covariates; `Pooled` fits on
//! everyone still at risk, adds the observed exposure history as covariates,
//! and predicts with exposure set to the regimen. Exposure models are the
//! same in both modes: monotonicity makes the exposure history constant
//! within the at-risk stratum, so there is nothing to pool over.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::{follows_regimen, Dataset, OutcomeScaler, Regimen};
use crate::error::{CoreError, Result};
use crate::inference;
use crate::learners::{self, FitContext, FittedLearner, LearnerSpec, TrainingSet};
use crate::{derive_seed, expit, logit};

/// Cumulative propensities below this are lifted to it.
pub const DEFAULT_TRUNCATION: f64 = 0.005;
/// Largest enumerable covariate-history space for likelihood G-computation.
const MAX_ENUM_BITS: usize = 20;
/// Fluctuation solves the score far below the 1e-8 reporting tolerance.
const FLUCT_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Subset,
    Pooled,
}

/// How likelihood G-computation models the final-visit outcome mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeForm {
    /// Fit `E(scaled Y | history)` directly with the learner.
    Direct,
    /// For running-count outcomes `Y = sum of per-visit indicators`: the
    /// observed history contributes its indicators, and only the final
    /// increment is modeled.
    CountSum,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorOptions {
    pub truncation_floor: f64,
    pub conditioning: Conditioning,
    /// Bootstrap replicates for G-computation standard errors; zero skips
    /// the bootstrap and reports NaN standard errors.
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            truncation_floor: DEFAULT_TRUNCATION,
            conditioning: Conditioning::Subset,
            bootstrap: 0,
            seed: 1,
        }
    }
}

/// Per-visit conditional probabilities of staying on protocol and their
/// truncated cumulative products.
#[derive(Debug, Clone)]
pub struct PropensityFits {
    /// `n x K`: truncated cumulative propensity through visit t.
    pub gbar: Array2<f64>,
    /// `n x K`: Pr(C_t = 0 | history) under the regimen.
    pub cens: Array2<f64>,
    /// `n x (K-1)`: Pr(A_t = regimen_t | history); exactly 1 where the
    /// regimen makes the decision deterministic.
    pub treat: Array2<f64>,
    /// Decision points where exposure is forced by monotonicity.
    pub deterministic: Vec<bool>,
    /// Smallest cumulative propensity before truncation.
    pub min_gbar_raw: f64,
    /// Entries lifted to the floor.
    pub truncated: usize,
    pub truncation_floor: f64,
    /// Fitting stratum sizes: censoring models then exposure models.
    pub stratum_sizes: Vec<usize>,
    /// Logistic fits that fell back to the ridge-stabilized refit.
    pub separation_fallbacks: usize,
}

/// Nested regression surfaces from the sequential recursion. Column `t-1`
/// holds `Qbar_t` for t = 1..K; column K holds the scaled outcome.
#[derive(Debug, Clone)]
pub struct SequentialFits {
    pub qbar: Array2<f64>,
    /// Targeted (fluctuated) surfaces; None for plain sequential
    /// G-computation.
    pub qbar_star: Option<Array2<f64>>,
    /// Fluctuation coefficients, index t-1.
    pub epsilons: Vec<f64>,
    /// Visits where every clever covariate was zero (fluctuation skipped).
    pub degenerate_fluctuations: Vec<bool>,
    /// Followers used to fit each regression, index t-1.
    pub followers: Vec<usize>,
    /// Logistic fits that fell back to the ridge-stabilized refit.
    pub separation_fallbacks: usize,
}

/// A point estimate with its uncertainty and audit trail.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub method: String,
    pub regimen: String,
    pub psi: f64,
    /// NaN when no variance estimator was requested.
    pub se: f64,
    pub ci: (f64, f64),
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub report: EstimateReport,
    /// Per-subject influence values on the outcome scale (TMLE, IPTW).
    pub ic: Option<Vec<f64>>,
    /// Bootstrap replicate estimates (G-computation methods).
    pub replicates: Option<Vec<f64>>,
}

fn check_inputs(d: &Dataset, reg: &Regimen) -> Result<()> {
    d.require_canonical()?;
    if reg.len() != d.k() - 1 {
        return Err(CoreError::invalid_argument(format!(
            "regimen has {} decision points, dataset has {}",
            reg.len(),
            d.k() - 1
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Design assembly.
// ---------------------------------------------------------------------------

/// Covariates `(l_1..l_h, w)` for every subject.
fn design_lw(d: &Dataset, h: usize) -> Array2<f64> {
    let p = d.p();
    let mut x = Array2::zeros((d.n(), h + p));
    for (i, r) in d.records().iter().enumerate() {
        for t in 0..h {
            x[[i, t]] = f64::from(u8::from(r.l[t]));
        }
        for j in 0..p {
            x[[i, h + j]] = r.w[j];
        }
    }
    x
}

/// Covariates `(l_1..l_h, a_1..a_j, w)`; exposure columns carry the observed
/// history, or the regimen when `fix_to` is given.
fn design_law(d: &Dataset, h: usize, j: usize, fix_to: Option<&Regimen>) -> Array2<f64> {
    let p = d.p();
    let mut x = Array2::zeros((d.n(), h + j + p));
    for (i, r) in d.records().iter().enumerate() {
        for t in 0..h {
            x[[i, t]] = f64::from(u8::from(r.l[t]));
        }
        for s in 0..j {
            let a = match fix_to {
                Some(reg) => reg.at(s + 1),
                None => r.a[s],
            };
            x[[i, h + s]] = f64::from(u8::from(a));
        }
        for q in 0..p {
            x[[i, h + j + q]] = r.w[q];
        }
    }
    x
}

/// `(fixed l pattern, w)` used to enumerate covariate histories.
fn design_fixed_lw(d: &Dataset, pattern: &[bool]) -> Array2<f64> {
    let p = d.p();
    let h = pattern.len();
    let mut x = Array2::zeros((d.n(), h + p));
    for (i, r) in d.records().iter().enumerate() {
        for (t, &bit) in pattern.iter().enumerate() {
            x[[i, t]] = f64::from(u8::from(bit));
        }
        for j in 0..p {
            x[[i, h + j]] = r.w[j];
        }
    }
    x
}

fn rows(d: &Dataset, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..d.n()).filter(|&i| keep(i)).collect()
}

fn subset_training(
    x: &Array2<f64>,
    y: &Array1<f64>,
    idx: &[usize],
    visit: usize,
    what: &str,
) -> Result<TrainingSet> {
    if idx.is_empty() {
        return Err(CoreError::EmptyStratum {
            visit,
            detail: what.to_string(),
        });
    }
    let xs = x.select(ndarray::Axis(0), idx);
    let ys = y.select(ndarray::Axis(0), idx);
    TrainingSet::new(xs, ys, None)
}

/// Cluster ordinals restricted to a fitting subset, for cluster-respecting
/// cross-validation inside the super learner.
fn subset_clusters(ords: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| ords[i]).collect()
}

struct Fitter<'a> {
    spec: &'a LearnerSpec,
    seed: u64,
    counter: u64,
    ords: Vec<usize>,
    separation_fallbacks: usize,
}

impl<'a> Fitter<'a> {
    fn new(spec: &'a LearnerSpec, seed: u64, d: &Dataset) -> Self {
        Fitter {
            spec,
            seed,
            counter: 0,
            ords: d.cluster_ordinals(),
            separation_fallbacks: 0,
        }
    }

    fn fit(&mut self, ts: &TrainingSet, idx: &[usize]) -> Result<FittedLearner> {
        self.counter += 1;
        let clusters = subset_clusters(&self.ords, idx);
        let ctx = FitContext {
            seed: derive_seed(self.seed, self.counter),
            cluster_ids: Some(&clusters),
        };
        let f = learners::fit(self.spec, ts, &ctx)?;
        if f.separation_fallback() {
            self.separation_fallbacks += 1;
        }
        Ok(f)
    }
}

// ---------------------------------------------------------------------------
// Propensity: per-visit models and cumulative products.
// ---------------------------------------------------------------------------

/// Fits the censoring and exposure models for a regimen and accumulates the
/// truncated cumulative propensity through each visit.
pub fn fit_propensity(
    d: &Dataset,
    reg: &Regimen,
    learner: &LearnerSpec,
    opts: &EstimatorOptions,
) -> Result<PropensityFits> {
    check_inputs(d, reg)?;
    if !(opts.truncation_floor > 0.0 && opts.truncation_floor < 0.5) {
        return Err(CoreError::invalid_argument(
            "truncation floor must lie in (0, 0.5)",
        ));
    }
    let n = d.n();
    let k = d.k();
    let recs = d.records();
    let mut fitter = Fitter::new(learner, derive_seed(opts.seed, 0x9), d);
    let mut cens = Array2::zeros((n, k));
    let mut treat = Array2::zeros((n, k - 1));
    let mut deterministic = vec![false; k - 1];
    let mut stratum_sizes = Vec::with_capacity(2 * k - 1);

    for t in 1..=k {
        // Pr(C_t = 0 | H): at risk means uncensored at t-1 (everyone at t=1).
        let at_risk = |i: usize| t == 1 || !recs[i].c[t - 2];
        let on_regimen =
            |i: usize| recs[i].a[..t - 1] == reg.as_slice()[..t - 1];
        let idx = match opts.conditioning {
            Conditioning::Subset => rows(d, |i| at_risk(i) && on_regimen(i)),
            Conditioning::Pooled => rows(d, at_risk),
        };
        stratum_sizes.push(idx.len());
        let y: Array1<f64> = recs.iter().map(|r| f64::from(u8::from(!r.c[t - 1]))).collect();
        let (x_fit, x_pred) = match opts.conditioning {
            Conditioning::Subset => {
                let x = design_lw(d, t - 1);
                (x.clone(), x)
            }
            Conditioning::Pooled => (
                design_law(d, t - 1, t - 1, None),
                design_law(d, t - 1, t - 1, Some(reg)),
            ),
        };
        let ts = subset_training(&x_fit, &y, &idx, t, "censoring model")?;
        let f = fitter.fit(&ts, &idx)?;
        cens.column_mut(t - 1)
            .assign(&learners::predict(&f, &x_pred.view(), None)?);
    }

    for j in 1..=k - 1 {
        // Pr(A_j = regimen_j | H): forced to continue-at-zero once the
        // regimen has stopped, probability one by monotonicity.
        if j >= 2 && !reg.at(j - 1) {
            deterministic[j - 1] = true;
            treat.column_mut(j - 1).fill(1.0);
            stratum_sizes.push(0);
            continue;
        }
        let idx = rows(d, |i| {
            !recs[i].c[j - 1] && recs[i].a[..j - 1] == reg.as_slice()[..j - 1]
        });
        stratum_sizes.push(idx.len());
        let y: Array1<f64> = recs.iter().map(|r| f64::from(u8::from(r.a[j - 1]))).collect();
        let x = design_lw(d, j);
        let ts = subset_training(&x, &y, &idx, j, "exposure model")?;
        let f = fitter.fit(&ts, &idx)?;
        let p = learners::predict(&f, &x.view(), None)?;
        let target = reg.at(j);
        for i in 0..n {
            treat[[i, j - 1]] = if target { p[i] } else { 1.0 - p[i] };
        }
    }

    let mut gbar = Array2::zeros((n, k));
    let mut min_raw = f64::INFINITY;
    let mut truncated = 0usize;
    for i in 0..n {
        let mut acc = 1.0;
        for t in 1..=k {
            acc *= cens[[i, t - 1]];
            if t >= 2 {
                acc *= treat[[i, t - 2]];
            }
            min_raw = min_raw.min(acc);
            if acc < opts.truncation_floor {
                truncated += 1;
                gbar[[i, t - 1]] = opts.truncation_floor;
            } else {
                gbar[[i, t - 1]] = acc;
            }
        }
    }
    Ok(PropensityFits {
        gbar,
        cens,
        treat,
        deterministic,
        min_gbar_raw: min_raw,
        truncated,
        truncation_floor: opts.truncation_floor,
        stratum_sizes,
        separation_fallbacks: fitter.separation_fallbacks,
    })
}

/// Inverse-probability covariate at visit `t`: follower indicator divided by
/// the truncated cumulative propensity.
pub fn clever_covariate(
    prop: &PropensityFits,
    d: &Dataset,
    reg: &Regimen,
    t: usize,
) -> Result<Array1<f64>> {
    check_inputs(d, reg)?;
    if t == 0 || t > d.k() {
        return Err(CoreError::invalid_argument(format!(
            "visit {t} out of range 1..={}",
            d.k()
        )));
    }
    let mut g = Array1::zeros(d.n());
    for (i, r) in d.records().iter().enumerate() {
        if follows_regimen(r, reg, t)? {
            g[i] = 1.0 / prop.gbar[[i, t - 1]];
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Fluctuation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Fluctuation {
    pub updated: Array1<f64>,
    pub epsilon: f64,
    /// True when every clever covariate was zero and the update degenerated
    /// to the identity.
    pub degenerate: bool,
}

/// Solves the one-parameter offset-logistic fluctuation
/// `logit Q1 = logit Q + eps * g` so the weighted score
/// `sum g (target - Q1)` is zero, and evaluates the updated surface. With
/// `eps = 0` (including the all-zero-g degenerate case) the input is
/// returned unchanged.
pub fn fluctuate(
    qt: &ArrayView1<f64>,
    target: &ArrayView1<f64>,
    g: &ArrayView1<f64>,
) -> Result<Fluctuation> {
    let n = qt.len();
    if target.len() != n || g.len() != n {
        return Err(CoreError::invalid_argument(
            "fluctuation inputs differ in length",
        ));
    }
    if qt.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(CoreError::invalid_argument(
            "fluctuation offset requires predictions strictly inside (0, 1)",
        ));
    }
    if g.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(CoreError::invalid_argument(
            "clever covariate must be finite and nonnegative",
        ));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Ok(Fluctuation {
            updated: qt.to_owned(),
            epsilon: 0.0,
            degenerate: true,
        });
    }
    let offset: Array1<f64> = qt.mapv(logit);
    let x = g.to_owned().insert_axis(ndarray::Axis(1));
    let ts = TrainingSet::new(x, target.to_owned(), None)?;
    let fit = learners::fit_logistic_opts(
        &ts,
        Some(&offset.view()),
        0.0,
        learners::IrlsOptions {
            intercept: false,
            tol: FLUCT_TOL,
            max_iter: 200,
        },
    )?;
    let epsilon = match &fit {
        FittedLearner::Logistic(f) => f.beta[0],
        _ => unreachable!("fluctuation fit is logistic"),
    };
    let updated = if epsilon == 0.0 {
        qt.to_owned()
    } else {
        // Evaluated unclamped so the solved score stays exactly zero.
        Array1::from_shape_fn(n, |i| expit(offset[i] + epsilon * g[i]))
    };
    Ok(Fluctuation {
        updated,
        epsilon,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Sequential recursion shared by sequential G-computation and TMLE.
// ---------------------------------------------------------------------------

fn seq_recursion(
    d: &Dataset,
    reg: &Regimen,
    learner: &LearnerSpec,
    scaler: &OutcomeScaler,
    opts: &EstimatorOptions,
    prop: Option<&PropensityFits>,
) -> Result<(f64, SequentialFits)> {
    let n = d.n();
    let k = d.k();
    let recs = d.records();
    let targeting = prop.is_some();
    let mut fitter = Fitter::new(learner, derive_seed(opts.seed, 0x5), d);

    let scaled_y: Array1<f64> = recs.iter().map(|r| scaler.scale(f64::from(r.y))).collect();
    if scaled_y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::invalid_data(
            "outcome exceeds the scaler range; rebuild the scaler for this dataset",
        ));
    }
    let mut qbar = Array2::zeros((n, k + 1));
    qbar.column_mut(k).assign(&scaled_y);
    let mut qbar_star = targeting.then(|| qbar.clone());
    let mut epsilons = vec![0.0; k];
    let mut degenerate = vec![false; k];
    let mut followers = vec![0usize; k];

    let mut target = scaled_y;
    for t in (1..=k).rev() {
        let follower_rows: Vec<usize> = (0..n)
            .filter(|&i| follows_regimen(&recs[i], reg, t).expect("validated inputs"))
            .collect();
        followers[t - 1] = follower_rows.len();
        let idx = match opts.conditioning {
            Conditioning::Subset => follower_rows.clone(),
            Conditioning::Pooled => rows(d, |i| !recs[i].c[t - 1]),
        };
        let (x_fit, x_pred) = match opts.conditioning {
            Conditioning::Subset => {
                let x = design_lw(d, t - 1);
                (x.clone(), x)
            }
            Conditioning::Pooled => (
                design_law(d, t - 1, t - 1, None),
                design_law(d, t - 1, t - 1, Some(reg)),
            ),
        };
        let ts = subset_training(&x_fit, &target, &idx, t, "outcome regression")?;
        let f = fitter.fit(&ts, &idx)?;
        let preds = learners::predict(&f, &x_pred.view(), None)?;
        qbar.column_mut(t - 1).assign(&preds);
        match (targeting, &mut qbar_star) {
            (true, Some(star)) => {
                let g = clever_covariate(prop.expect("targeting"), d, reg, t)?;
                let fl = fluctuate(&preds.view(), &target.view(), &g.view())?;
                epsilons[t - 1] = fl.epsilon;
                degenerate[t - 1] = fl.degenerate;
                star.column_mut(t - 1).assign(&fl.updated);
                target = fl.updated;
            }
            _ => {
                target = preds;
            }
        }
    }

    let first = match &qbar_star {
        Some(star) => star.column(0),
        None => qbar.column(0),
    };
    let psi_scaled = first.sum() / n as f64;
    let fits = SequentialFits {
        qbar,
        qbar_star,
        epsilons,
        degenerate_fluctuations: degenerate,
        followers,
        separation_fallbacks: fitter.separation_fallbacks,
    };
    Ok((psi_scaled, fits))
}

fn base_diagnostics(d: &Dataset, fits: &SequentialFits) -> BTreeMap<String, f64> {
    let mut diag = BTreeMap::new();
    diag.insert("n".to_string(), d.n() as f64);
    diag.insert("clusters".to_string(), d.n_clusters() as f64);
    for (t, &f) in fits.followers.iter().enumerate() {
        diag.insert(format!("followers_t{}", t + 1), f as f64);
    }
    if fits.separation_fallbacks > 0 {
        diag.insert(
            "separation_fallbacks".to_string(),
            fits.separation_fallbacks as f64,
        );
    }
    diag
}

fn propensity_diagnostics(diag: &mut BTreeMap<String, f64>, prop: &PropensityFits) {
    diag.insert("min_gbar_raw".to_string(), prop.min_gbar_raw);
    diag.insert("gbar_truncated".to_string(), prop.truncated as f64);
    diag.insert("truncation_floor".to_string(), prop.truncation_floor);
}

fn bootstrap_se(
    d: &Dataset,
    b: usize,
    seed: u64,
    point: impl Fn(&Dataset) -> Result<f64> + Sync,
) -> Result<(f64, (f64, f64), Vec<f64>, usize)> {
    let boot = inference::pairs_cluster_bootstrap(d, b, seed, point)?;
    Ok((boot.se, boot.percentile_ci, boot.replicates, boot.failed))
}

// ---------------------------------------------------------------------------
// Sequential G-computation.
// ---------------------------------------------------------------------------

/// Sequential (iterated-expectation) G-computation. The point estimate is
/// the mean of the innermost regression; the standard error, when
/// `opts.bootstrap > 0`, comes from the pairs cluster bootstrap with a
/// percentile interval.
pub fn gcomp_sequential(
    d: &Dataset,
    reg: &Regimen,
    learner: &LearnerSpec,
    scaler: &OutcomeScaler,
    opts: &EstimatorOptions,
) -> Result<Estimate> {
    check_inputs(d, reg)?;
    let (psi_scaled, fits) = seq_recursion(d, reg, learner, scaler, opts, None)?;
    let psi = scaler.unscale(psi_scaled);
    let mut diag = base_diagnostics(d, &fits);
    let (se, ci, replicates) = if opts.bootstrap > 0 {
        let inner = EstimatorOptions { bootstrap: 0, ..*opts };
        let (se, ci, reps, failed) = bootstrap_se(d, opts.bootstrap, opts.seed, |rd| {
            let (ps, _) = seq_recursion(rd, reg, learner, scaler, &inner, None)?;
            Ok(scaler.unscale(ps))
        })?;
        diag.insert("bootstrap_reps".to_string(), reps.len() as f64);
        diag.insert("bootstrap_failed".to_string(), failed as f64);
        (se, ci, Some(reps))
    } else {
        (f64::NAN, (f64::NAN, f64::NAN), None)
    };
    Ok(Estimate {
        report: EstimateReport {
            method: "gcomp-sequential".to_string(),
            regimen: reg.to_string(),
            psi,
            se,
            ci,
            diagnostics: diag,
        },
        ic: None,
        replicates,
    })
}

// ---------------------------------------------------------------------------
// Likelihood G-computation.
// ---------------------------------------------------------------------------

fn enum_patterns(bits: usize) -> Vec<Vec<bool>> {
    (0..(1usize << bits))
        .map(|code| (0..bits).map(|b| code >> b & 1 == 1).collect())
        .collect()
}

/// Likelihood-based G-computation: models each covariate transition and the
/// final outcome mean, then sums the outcome surface over every covariate
/// history weighted by the modeled transition probabilities, averaged over
/// subjects' baseline covariates.
pub fn gcomp_likelihood(
    d: &Dataset,
    reg: &Regimen,
    learner: &LearnerSpec,
    scaler: &OutcomeScaler,
    form: OutcomeForm,
    opts: &EstimatorOptions,
) -> Result<Estimate> {
    check_inputs(d, reg)?;
    let k = d.k();
    if k - 1 > MAX_ENUM_BITS {
        return Err(CoreError::invalid_argument(format!(
            "likelihood G-computation enumerates 2^{} covariate histories; \
             limit is 2^{MAX_ENUM_BITS}",
            k - 1
        )));
    }
    let psi = likelihood_point(d, reg, learner, scaler, form, opts)?;
    let mut diag = BTreeMap::new();
    diag.insert("n".to_string(), d.n() as f64);
    diag.insert("clusters".to_string(), d.n_clusters() as f64);
    diag.insert("histories".to_string(), (1usize << (k - 1)) as f64);
    let (se, ci, replicates) = if opts.bootstrap > 0 {
        let inner = EstimatorOptions { bootstrap: 0, ..*opts };
        let (se, ci, reps, failed) = bootstrap_se(d, opts.bootstrap, opts.seed, |rd| {
            likelihood_point(rd, reg, learner, scaler, form, &inner)
        })?;
        diag.insert("bootstrap_reps".to_string(), reps.len() as f64);
        diag.insert("bootstrap_failed".to_string(), failed as f64);
        (se, ci, Some(reps))
    } else {
        (f64::NAN, (f64::NAN, f64::NAN), None)
    };
    Ok(Estimate {
        report: EstimateReport {
            method: "gcomp-likelihood".to_string(),
            regimen: reg.to_string(),
            psi,
            se,
            ci,
            diagnostics: diag,
        },
        ic: None,
        replicates,
    })
}

fn likelihood_point(
    d: &Dataset,
    reg: &Regimen,
    learner: &LearnerSpec,
    scaler: &OutcomeScaler,
    form: OutcomeForm,
    opts: &EstimatorOptions,
) -> Result<f64> {
    let n = d.n();
    let k = d.k();
    let recs = d.records();
    let mut fitter = Fitter::new(learner, derive_seed(opts.seed, 0x11), d);

    // Transition models: Pr(L_t = 1 | on protocol through t, history).
    // lt_preds[t-1][prefix code] holds predictions for all subjects with the
    // covariate history fixed to the prefix pattern.
    let mut lt_preds: Vec<Vec<Array1<f64>>> = Vec::with_capacity(k - 1);
    for t in 1..=k - 1 {
        let follower = |i: usize| {
            !recs[i].c[t - 1] && recs[i].a[..t - 1] == reg.as_slice()[..t - 1]
        };
        let idx = match opts.conditioning {
            Conditioning::Subset => rows(d, follower),
            Conditioning::Pooled => rows(d, |i| !recs[i].c[t - 1]),
        };
        let y: Array1<f64> = recs.iter().map(|r| f64::from(u8::from(r.l[t - 1]))).collect();
        let x_fit = match opts.conditioning {
            Conditioning::Subset => design_lw(d, t - 1),
            Conditioning::Pooled => design_law(d, t - 1, t - 1, None),
        };
        let ts = subset_training(&x_fit, &y, &idx, t, "covariate transition model")?;
        let f = fitter.fit(&ts, &idx)?;
        let mut by_prefix = Vec::with_capacity(1 << (t - 1));
        for pattern in enum_patterns(t - 1) {
            let x_pred = match opts.conditioning {
                Conditioning::Subset => design_fixed_lw(d, &pattern),
                Conditioning::Pooled => {
                    let mut x = design_law(d, t - 1, t - 1, Some(reg));
                    for (col, &bit) in pattern.iter().enumerate() {
                        x.column_mut(col).fill(f64::from(u8::from(bit)));
                    }
                    x
                }
            };
            by_prefix.push(learners::predict(&f, &x_pred.view(), None)?);
        }
        lt_preds.push(by_prefix);
    }

    // Outcome surface per full covariate history.
    let outcome_idx = rows(d, |i| {
        follows_regimen(&recs[i], reg, k).expect("validated inputs")
    });
    let outcome_y: Array1<f64> = match form {
        OutcomeForm::Direct => recs.iter().map(|r| scaler.scale(f64::from(r.y))).collect(),
        OutcomeForm::CountSum => {
            let mut y = Array1::zeros(n);
            for (i, r) in recs.iter().enumerate() {
                if !r.c[k - 1] {
                    let run: u32 = r.l.iter().map(|&b| u32::from(b)).sum();
                    let last = i64::from(r.y) - i64::from(run);
                    if !(0..=1).contains(&last) {
                        return Err(CoreError::invalid_data(format!(
                            "subject {}: outcome {} is not covariate count plus a final \
                             0/1 increment; use the direct outcome form",
                            r.subject_id, r.y
                        )));
                    }
                    y[i] = last as f64;
                }
            }
            y
        }
    };
    let x_fit = match opts.conditioning {
        Conditioning::Subset => design_lw(d, k - 1),
        Conditioning::Pooled => design_law(d, k - 1, k - 1, None),
    };
    let outcome_rows = match opts.conditioning {
        Conditioning::Subset => outcome_idx,
        Conditioning::Pooled => rows(d, |i| !recs[i].c[k - 1]),
    };
    let ts = subset_training(&x_fit, &outcome_y, &outcome_rows, k, "outcome model")?;
    let f = fitter.fit(&ts, &outcome_rows)?;
    let patterns = enum_patterns(k - 1);
    let mut ey: Vec<Array1<f64>> = Vec::with_capacity(patterns.len());
    for pattern in &patterns {
        let x_pred = match opts.conditioning {
            Conditioning::Subset => design_fixed_lw(d, pattern),
            Conditioning::Pooled => {
                let mut x = design_law(d, k - 1, k - 1, Some(reg));
                for (col, &bit) in pattern.iter().enumerate() {
                    x.column_mut(col).fill(f64::from(u8::from(bit)));
                }
                x
            }
        };
        let p = learners::predict(&f, &x_pred.view(), None)?;
        let e = match form {
            OutcomeForm::Direct => p.mapv(|v| scaler.unscale(v)),
            OutcomeForm::CountSum => {
                let run: f64 = pattern.iter().map(|&b| f64::from(u8::from(b))).sum();
                p.mapv(|v| run + v)
            }
        };
        ey.push(e);
    }

    // psi_i = sum over histories of E(Y | history, w_i) * Pr(history | w_i).
    let mut total = 0.0;
    for i in 0..n {
        let mut psi_i = 0.0;
        for (code, pattern) in patterns.iter().enumerate() {
            let mut weight = 1.0;
            for t in 1..k {
                let prefix = code & ((1 << (t - 1)) - 1);
                let p1 = lt_preds[t - 1][prefix][i];
                weight *= if pattern[t - 1] { p1 } else { 1.0 - p1 };
            }
            psi_i += weight * ey[code][i];
        }
        total += psi_i;
    }
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// Stabilized IPTW.
// ---------------------------------------------------------------------------

/// Stabilized inverse-probability estimator: mean outcome among subjects who
/// completed the regimen uncensored, weighted by the inverse cumulative
/// propensity and normalized by the realized weight mass. The influence
/// curve linearizes the weighted ratio; its clustered sandwich gives the
/// standard error.
pub fn iptw(d: &Dataset, reg: &Regimen, prop: &PropensityFits) -> Result<Estimate> {
    check_inputs(d, reg)?;
    let n = d.n();
    let k = d.k();
    let recs = d.records();
    let g = clever_covariate(prop, d, reg, k)?;
    let followers = g.iter().filter(|&&v| v > 0.0).count();
    if followers == 0 {
        return Err(CoreError::EmptyStratum {
            visit: k,
            detail: "no subject completed the regimen uncensored".to_string(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, r) in recs.iter().enumerate() {
        num += g[i] * f64::from(r.y);
        den += g[i];
    }
    let psi = num / den;
    let mean_weight = den / n as f64;
    let ic: Vec<f64> = recs
        .iter()
        .enumerate()
        .map(|(i, r)| g[i] * (f64::from(r.y) - psi) / mean_weight)
        .collect();
    let var = inference::clustered_sandwich(&ic, d.cluster_index())?;
    let ci = inference::wald_ci(psi, var.se);
    let mut diag = BTreeMap::new();
    diag.insert("n".to_string(), n as f64);
    diag.insert("clusters".to_string(), d.n_clusters() as f64);
    diag.insert(format!("followers_t{k}"), followers as f64);
    diag.insert("mean_weight".to_string(), mean_weight);
    diag.insert(
        "stabilization".to_string(),
        prop.gbar.column(k - 1).sum() / n as f64,
    );
    propensity_diagnostics(&mut diag, prop);
    Ok(Estimate {
        report: EstimateReport {
            method: "iptw".to_string(),
            regimen: reg.to_string(),
            psi,
            se: var.se,
            ci,
            diagnostics: diag,
        },
        ic: Some(ic),
        replicates: None,
    })
}

// ---------------------------------------------------------------------------
// TMLE.
// ---------------------------------------------------------------------------

/// Targeted maximum likelihood: the sequential recursion with a one-step
/// fluctuation at each visit along the clever covariate, yielding an
/// estimator whose influence-curve components each average to zero. The
/// standard error is the clustered sandwich of the efficient influence
/// curve.
pub fn tmle(
    d: &Dataset,
    reg: &Regimen,
    learner: &LearnerSpec,
    prop: &PropensityFits,
    scaler: &OutcomeScaler,
    opts: &EstimatorOptions,
) -> Result<(Estimate, SequentialFits)> {
    check_inputs(d, reg)?;
    let (psi_scaled, fits) = seq_recursion(d, reg, learner, scaler, opts, Some(prop))?;
    let psi = scaler.unscale(psi_scaled);
    let ic = inference::efficient_influence_curve(d, reg, &fits, prop, psi, scaler)?;
    let var = inference::clustered_sandwich(&ic.total, d.cluster_index())?;
    let ci = inference::wald_ci(psi, var.se);
    let mut diag = base_diagnostics(d, &fits);
    propensity_diagnostics(&mut diag, prop);
    for (t, &e) in fits.epsilons.iter().enumerate() {
        diag.insert(format!("epsilon_t{}", t + 1), e);
    }
    for (t, &z) in fits.degenerate_fluctuations.iter().enumerate() {
        if z {
            diag.insert(format!("degenerate_fluctuation_t{}", t + 1), 1.0);
        }
    }
    let est = Estimate {
        report: EstimateReport {
            method: "tmle".to_string(),
            regimen: reg.to_string(),
            psi,
            se: var.se,
            ci,
            diagnostics: diag,
        },
        ic: Some(ic.total),
        replicates: None,
    };
    Ok((est, fits))
}

// ---------------------------------------------------------------------------
// Contrasts.
// ---------------------------------------------------------------------------

/// Difference of two estimates of the same method on the same dataset.
/// With influence curves the variance is the clustered sandwich of the
/// per-subject IC difference; with bootstrap replicates (G-computation) the
/// replicate-wise differences give the percentile interval, which is valid
/// because both estimates were bootstrapped over the same cluster resamples
/// (same seed).
pub fn contrast(a: &Estimate, b: &Estimate, d: &Dataset) -> Result<Estimate> {
    let psi = a.report.psi - b.report.psi;
    let label = format!("{}: {} - {}", a.report.method, a.report.regimen, b.report.regimen);
    let mut diag = BTreeMap::new();
    diag.insert("n".to_string(), d.n() as f64);
    match (&a.ic, &b.ic, &a.replicates, &b.replicates) {
        (Some(ia), Some(ib), _, _) => {
            if ia.len() != ib.len() || ia.len() != d.n() {
                return Err(CoreError::invalid_argument(
                    "influence curves do not match the dataset",
                ));
            }
            let diff: Vec<f64> = ia.iter().zip(ib).map(|(x, y)| x - y).collect();
            let var = inference::clustered_sandwich(&diff, d.cluster_index())?;
            let ci = inference::wald_ci(psi, var.se);
            Ok(Estimate {
                report: EstimateReport {
                    method: a.report.method.clone(),
                    regimen: label,
                    psi,
                    se: var.se,
                    ci,
                    diagnostics: diag,
                },
                ic: Some(diff),
                replicates: None,
            })
        }
        (_, _, Some(ra), Some(rb)) => {
            if ra.len() != rb.len() {
                return Err(CoreError::invalid_argument(
                    "bootstrap replicate counts differ; contrasts need a shared seed",
                ));
            }
            let diffs: Vec<f64> = ra.iter().zip(rb).map(|(x, y)| x - y).collect();
            let mut sorted = diffs.clone();
            sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite replicates"));
            let se = inference::sample_sd(&diffs);
            let ci = (
                inference::quantile_type7(&sorted, 0.025),
                inference::quantile_type7(&sorted, 0.975),
            );
            diag.insert("bootstrap_reps".to_string(), diffs.len() as f64);
            Ok(Estimate {
                report: EstimateReport {
                    method: a.report.method.clone(),
                    regimen: label,
                    psi,
                    se,
                    ci,
                    diagnostics: diag,
                },
                ic: None,
                replicates: Some(diffs),
            })
        }
        _ => Err(CoreError::invalid_argument(
            "contrast needs either influence curves or bootstrap replicates on both sides",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::impute_after_censoring;
    use crate::testutil::record;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fluctuation_solves_the_closed_form() {
        // Offset zero, unit covariate, target 0.75: the update solves
        // expit(eps) = 0.75, so eps = logit(0.75).
        let qt = array![0.5, 0.5, 0.5, 0.5];
        let target = array![0.75, 0.75, 0.75, 0.75];
        let g = array![1.0, 1.0, 1.0, 1.0];
        let fl = fluctuate(&qt.view(), &target.view(), &g.view()).unwrap();
        assert!((fl.epsilon - logit(0.75)).abs() < 1e-9);
        for &u in &fl.updated {
            assert!((u - 0.75).abs() < 1e-9);
        }
        assert!(!fl.degenerate);
    }

    #[test]
    fn fluctuation_score_is_zero_at_the_solution() {
        let qt = array![0.3, 0.6, 0.2, 0.8, 0.5];
        let target = array![0.1, 0.9, 0.4, 0.7, 0.55];
        let g = array![2.0, 0.0, 1.5, 3.0, 0.5];
        let fl = fluctuate(&qt.view(), &target.view(), &g.view()).unwrap();
        let score: f64 = (0..5).map(|i| g[i] * (target[i] - fl.updated[i])).sum();
        assert!(score.abs() < 1e-9, "score {score}");
    }

    #[test]
    fn fluctuation_degenerates_to_identity_without_followers() {
        let qt = array![0.3, 0.7];
        let target = array![0.9, 0.1];
        let g = array![0.0, 0.0];
        let fl = fluctuate(&qt.view(), &target.view(), &g.view()).unwrap();
        assert!(fl.degenerate);
        assert_eq!(fl.epsilon, 0.0);
        assert_eq!(fl.updated, qt);
    }

    #[test]
    fn fluctuation_with_matched_target_is_exactly_the_identity() {
        // The score is already zero at eps = 0, so the surface must come
        // back bit-identical, not via a logit round trip.
        let qt = array![0.5, 0.5];
        let target = array![0.25, 0.75];
        let g = array![1.0, 1.0];
        let fl = fluctuate(&qt.view(), &target.view(), &g.view()).unwrap();
        assert_eq!(fl.epsilon, 0.0);
        assert_eq!(fl.updated, qt);
    }

    #[test]
    fn fluctuation_rejects_boundary_offsets() {
        let qt = array![0.0, 0.5];
        let target = array![0.5, 0.5];
        let g = array![1.0, 1.0];
        assert!(fluctuate(&qt.view(), &target.view(), &g.view()).is_err());
    }

    /// Hand-rolled propensity fits for weighting tests.
    fn manual_prop(gbar_k: &[f64], k: usize) -> PropensityFits {
        let n = gbar_k.len();
        let mut gbar = Array2::ones((n, k));
        for (i, &v) in gbar_k.iter().enumerate() {
            gbar[[i, k - 1]] = v;
        }
        PropensityFits {
            gbar,
            cens: Array2::ones((n, k)),
            treat: Array2::ones((n, k - 1)),
            deterministic: vec![false; k - 1],
            min_gbar_raw: gbar_k.iter().cloned().fold(f64::INFINITY, f64::min),
            truncated: 0,
            truncation_floor: DEFAULT_TRUNCATION,
            stratum_sizes: vec![],
            separation_fallbacks: 0,
        }
    }

    #[test]
    fn iptw_matches_the_hand_computed_ratio() {
        let recs = vec![
            record("s1", "c1", vec![0.0], vec![0, 0], vec![0], vec![1], 1),
            record("s2", "c1", vec![0.0], vec![0, 0], vec![0], vec![1], 0),
            record("s3", "c2", vec![0.0], vec![0, 0], vec![0], vec![1], 2),
        ];
        let d = Dataset::new(recs).unwrap();
        let reg = Regimen::always(2);
        let prop = manual_prop(&[0.5, 0.25, 0.5], 2);
        let est = iptw(&d, &reg, &prop).unwrap();
        // sum(y/g) = 2 + 0 + 4 = 6; sum(1/g) = 8.
        assert!((est.report.psi - 0.75).abs() < 1e-15);
        let ic = est.ic.unwrap();
        assert!(ic.iter().sum::<f64>().abs() < 1e-12);
        assert!((ic[1] - (4.0 * (0.0 - 0.75) / (8.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn iptw_ignores_nonfollowers() {
        let recs = vec![
            record("s1", "c1", vec![0.0], vec![0, 0], vec![0], vec![1], 1),
            // Censored at the outcome visit: weight zero.
            record("s2", "c1", vec![0.0], vec![0, 1], vec![0], vec![1], 0),
            // Off regimen: weight zero.
            record("s3", "c2", vec![0.0], vec![0, 0], vec![0], vec![0], 5),
        ];
        let d = impute_after_censoring(&Dataset::new(recs).unwrap());
        let reg = Regimen::always(2);
        let prop = manual_prop(&[0.5, 0.5, 0.5], 2);
        let est = iptw(&d, &reg, &prop).unwrap();
        assert!((est.report.psi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_exposure_contributes_unit_factors() {
        // Regimen 0,0 with K = 3: the second decision is forced by
        // monotonicity, so its factor is exactly one and no model is fit.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut recs = Vec::new();
        for i in 0..80 {
            let w = rng.random::<f64>() * 2.0 - 1.0;
            let a1 = rng.random::<f64>() < 0.5;
            let a2 = a1 && rng.random::<f64>() < 0.7;
            let l1 = rng.random::<f64>() < 0.4;
            let l2 = rng.random::<f64>() < 0.4;
            recs.push(record(
                &format!("s{i}"),
                &format!("c{}", i % 4),
                vec![w],
                vec![0, 0, 0],
                vec![u8::from(l1), u8::from(l2)],
                vec![u8::from(a1), u8::from(a2)],
                u32::from(rng.random::<f64>() < 0.5),
            ));
        }
        let d = Dataset::new(recs).unwrap();
        let reg = Regimen::never(3);
        let opts = EstimatorOptions::default();
        let prop = fit_propensity(&d, &reg, &LearnerSpec::logistic(), &opts).unwrap();
        assert_eq!(prop.deterministic, vec![false, true]);
        for i in 0..d.n() {
            assert_eq!(prop.treat[[i, 1]], 1.0);
        }
        // With no censoring the cumulative product is driven by the first
        // decision only; probabilities stay within (0, 1).
        for i in 0..d.n() {
            assert!(prop.gbar[[i, 2]] > 0.0 && prop.gbar[[i, 2]] <= 1.0);
        }
    }

    /// Random two-visit binary-covariate data with interior stratum means.
    fn binary_k2_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        for i in 0..n {
            let w = rng.random::<f64>() < 0.5;
            let c1 = rng.random::<f64>() < 0.15;
            let l1 = !c1 && rng.random::<f64>() < 0.35 + 0.2 * f64::from(u8::from(w));
            let a1 = !c1 && rng.random::<f64>() < 0.55;
            let c2 = c1 || rng.random::<f64>() < 0.15;
            let y = !c2 && rng.random::<f64>() < 0.3 + 0.25 * f64::from(u8::from(l1));
            recs.push(record(
                &format!("s{i}"),
                &format!("c{}", i % 5),
                vec![f64::from(u8::from(w))],
                vec![u8::from(c1), u8::from(c2)],
                vec![u8::from(l1)],
                vec![u8::from(a1)],
                u32::from(y),
            ));
        }
        impute_after_censoring(&Dataset::new(recs).unwrap())
    }

    /// Empirical plug-in for two visits and binary w under subset
    /// conditioning, written out stratum by stratum.
    fn brute_force_k2(d: &Dataset, reg: &Regimen) -> f64 {
        let recs = d.records();
        let a = reg.at(1);
        let mean = |keep: &dyn Fn(&crate::data::LongitudinalRecord) -> bool,
                    val: &dyn Fn(&crate::data::LongitudinalRecord) -> f64| {
            let xs: Vec<f64> = recs.iter().filter(|r| keep(r)).map(|r| val(r)).collect();
            assert!(!xs.is_empty(), "empty brute-force stratum");
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let mut psi = 0.0;
        for r in recs {
            let w = r.w[0];
            let pl = mean(
                &|s| !s.c[0] && s.w[0] == w,
                &|s| f64::from(u8::from(s.l[0])),
            );
            for l1 in [false, true] {
                let ey = mean(
                    &|s| !s.c[1] && s.a[0] == a && s.l[0] == l1 && s.w[0] == w,
                    &|s| f64::from(s.y),
                );
                psi += ey * if l1 { pl } else { 1.0 - pl };
            }
        }
        psi / recs.len() as f64
    }

    #[test]
    fn saturated_fits_reduce_every_gcomp_to_the_plug_in() {
        let d = binary_k2_dataset(23, 400);
        let scaler = crate::data::make_scaler(&d).unwrap();
        let opts = EstimatorOptions::default();
        let spec = LearnerSpec::Saturated;
        for reg in [Regimen::always(2), Regimen::never(2)] {
            let brute = brute_force_k2(&d, &reg);
            let seq = gcomp_sequential(&d, &reg, &spec, &scaler, &opts).unwrap();
            let lik =
                gcomp_likelihood(&d, &reg, &spec, &scaler, OutcomeForm::Direct, &opts).unwrap();
            assert!(
                (seq.report.psi - brute).abs() < 1e-10,
                "sequential {} vs {brute}",
                seq.report.psi
            );
            assert!(
                (lik.report.psi - brute).abs() < 1e-10,
                "likelihood {} vs {brute}",
                lik.report.psi
            );
        }
    }

    #[test]
    fn count_outcomes_decompose_or_fail_loudly() {
        // y = l1 + final increment fits the running-count form.
        let recs = vec![
            record("s1", "c1", vec![0.0], vec![0, 0], vec![1], vec![1], 2),
            record("s2", "c1", vec![0.0], vec![0, 0], vec![0], vec![1], 0),
            record("s3", "c2", vec![0.0], vec![0, 0], vec![1], vec![1], 1),
            record("s4", "c2", vec![0.0], vec![0, 0], vec![0], vec![1], 1),
        ];
        let d = Dataset::new(recs).unwrap();
        let scaler = crate::data::make_scaler(&d).unwrap();
        let opts = EstimatorOptions::default();
        let reg = Regimen::always(2);
        let est = gcomp_likelihood(
            &d,
            &reg,
            &LearnerSpec::Saturated,
            &scaler,
            OutcomeForm::CountSum,
            &opts,
        )
        .unwrap();
        assert!(est.report.psi.is_finite());

        let bad = vec![
            record("s1", "c1", vec![0.0], vec![0, 0], vec![0], vec![1], 4),
            record("s2", "c1", vec![0.0], vec![0, 0], vec![0], vec![1], 0),
        ];
        let bd = Dataset::new(bad).unwrap();
        let bscaler = crate::data::make_scaler(&bd).unwrap();
        let err = gcomp_likelihood(
            &bd,
            &reg,
            &LearnerSpec::Saturated,
            &bscaler,
            OutcomeForm::CountSum,
            &opts,
        )
        .unwrap_err();
        assert!(err.to_string().contains("direct outcome"));
    }

    /// Random three-visit data with enough censoring and switching to
    /// exercise every model.
    fn random_k3_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        for i in 0..n {
            let w = rng.random::<f64>() * 2.0 - 1.0;
            let mut c = [false; 3];
            let mut l = [false; 2];
            let mut a = [false; 2];
            c[0] = rng.random::<f64>() < 0.1;
            if !c[0] {
                l[0] = rng.random::<f64>() < expit(-0.4 + 0.8 * w);
                a[0] = rng.random::<f64>() < expit(0.3 - 0.5 * w);
            }
            c[1] = c[0] || rng.random::<f64>() < 0.12;
            if !c[1] {
                l[1] = rng.random::<f64>() < expit(-0.6 + 0.7 * w + f64::from(u8::from(l[0])));
                a[1] = a[0] && rng.random::<f64>() < expit(1.2 - 0.4 * w);
            }
            c[2] = c[1] || rng.random::<f64>() < 0.12;
            let y = !c[2]
                && rng.random::<f64>()
                    < expit(-0.8 + 0.9 * w + 0.6 * f64::from(u8::from(l[1]))
                        - 0.4 * f64::from(u8::from(a[1])));
            recs.push(record(
                &format!("s{i}"),
                &format!("c{}", i % 10),
                vec![w],
                c.iter().map(|&b| u8::from(b)).collect(),
                l.iter().map(|&b| u8::from(b)).collect(),
                a.iter().map(|&b| u8::from(b)).collect(),
                u32::from(y),
            ));
        }
        impute_after_censoring(&Dataset::new(recs).unwrap())
    }

    #[test]
    fn tmle_zeroes_every_influence_component() {
        let d = random_k3_dataset(97, 300);
        let scaler = crate::data::make_scaler(&d).unwrap();
        let opts = EstimatorOptions::default();
        let reg = Regimen::always(3);
        let spec = LearnerSpec::logistic();
        let prop = fit_propensity(&d, &reg, &spec, &opts).unwrap();
        let (est, fits) = tmle(&d, &reg, &spec, &prop, &scaler, &opts).unwrap();
        let ic = crate::inference::efficient_influence_curve(
            &d,
            &reg,
            &fits,
            &prop,
            est.report.psi,
            &scaler,
        )
        .unwrap();
        let n = d.n() as f64;
        for t in 0..=d.k() {
            let mean = ic.components.column(t).sum() / n;
            assert!(mean.abs() < 1e-8, "component {t} mean {mean}");
        }
        let total_mean = ic.total.iter().sum::<f64>() / n;
        assert!(total_mean.abs() < 1e-8, "total mean {total_mean}");
        assert!(est.report.se > 0.0);
        // The targeted estimate stays inside the outcome range.
        assert!(est.report.psi >= 0.0 && est.report.psi <= scaler.range());
    }

    #[test]
    fn pooled_conditioning_also_zeroes_the_score() {
        let d = random_k3_dataset(131, 300);
        let scaler = crate::data::make_scaler(&d).unwrap();
        let opts = EstimatorOptions {
            conditioning: Conditioning::Pooled,
            ..EstimatorOptions::default()
        };
        let reg = Regimen::always(3);
        let spec = LearnerSpec::logistic();
        let prop = fit_propensity(&d, &reg, &spec, &opts).unwrap();
        let (est, fits) = tmle(&d, &reg, &spec, &prop, &scaler, &opts).unwrap();
        let ic = crate::inference::efficient_influence_curve(
            &d,
            &reg,
            &fits,
            &prop,
            est.report.psi,
            &scaler,
        )
        .unwrap();
        let n = d.n() as f64;
        for t in 0..=d.k() {
            let mean = ic.components.column(t).sum() / n;
            assert!(mean.abs() < 1e-8, "component {t} mean {mean}");
        }
    }

    #[test]
    fn sequential_gcomp_bootstraps_an_interval() {
        let d = random_k3_dataset(55, 150);
        let scaler = crate::data::make_scaler(&d).unwrap();
        let opts = EstimatorOptions {
            bootstrap: 20,
            ..EstimatorOptions::default()
        };
        let reg = Regimen::always(3);
        let est = gcomp_sequential(&d, &reg, &LearnerSpec::logistic(), &scaler, &opts).unwrap();
        assert!(est.report.se.is_finite() && est.report.se > 0.0);
        let (lo, hi) = est.report.ci;
        assert!(lo <= est.report.psi + est.report.se);
        assert!(hi >= est.report.psi - est.report.se);
        assert_eq!(est.replicates.as_ref().unwrap().len(), 20);
        let d2 = est.report.diagnostics["bootstrap_failed"];
        assert_eq!(d2, 0.0);
    }

    #[test]
    fn contrasts_pair_bootstrap_replicates_by_seed() {
        let d = random_k3_dataset(55, 150);
        let scaler = crate::data::make_scaler(&d).unwrap();
        let opts = EstimatorOptions {
            bootstrap: 20,
            ..EstimatorOptions::default()
        };
        let spec = LearnerSpec::logistic();
        let always = gcomp_sequential(&d, &Regimen::always(3), &spec, &scaler, &opts).unwrap();
        let never = gcomp_sequential(&d, &Regimen::never(3), &spec, &scaler, &opts).unwrap();
        let diff = contrast(&always, &never, &d).unwrap();
        assert!(
            (diff.report.psi - (always.report.psi - never.report.psi)).abs() < 1e-15
        );
        assert!(diff.report.se.is_finite());
        let (lo, hi) = diff.report.ci;
        assert!(lo < hi);
    }

    #[test]
    fn contrasts_difference_influence_curves() {
        let d = random_k3_dataset(77, 200);
        let scaler = crate::data::make_scaler(&d).unwrap();
        let opts = EstimatorOptions::default();
        let spec = LearnerSpec::logistic();
        let pa = fit_propensity(&d, &Regimen::always(3), &spec, &opts).unwrap();
        let pn = fit_propensity(&d, &Regimen::never(3), &spec, &opts).unwrap();
        let (ea, _) = tmle(&d, &Regimen::always(3), &spec, &pa, &scaler, &opts).unwrap();
        let (en, _) = tmle(&d, &Regimen::never(3), &spec, &pn, &scaler, &opts).unwrap();
        let diff = contrast(&ea, &en, &d).unwrap();
        assert!(
            (diff.report.psi - (ea.report.psi - en.report.psi)).abs() < 1e-15
        );
        // IC of the difference is the difference of ICs, so its mean is
        // near zero as well.
        let ic = diff.ic.unwrap();
        assert!(ic.iter().sum::<f64>().abs() / d.n() as f64 <= 2e-8);
    }

    #[test]
    fn truncation_floors_the_cumulative_product() {
        let d = random_k3_dataset(42, 200);
        let opts = EstimatorOptions {
            truncation_floor: 0.4,
            ..EstimatorOptions::default()
        };
        let reg = Regimen::always(3);
        let prop = fit_propensity(&d, &reg, &LearnerSpec::logistic(), &opts).unwrap();
        assert!(prop.truncated > 0);
        for t in 0..3 {
            for i in 0..d.n() {
                assert!(prop.gbar[[i, t]] >= 0.4);
            }
        }
        assert!(prop.min_gbar_raw < 0.4);
    }

    #[test]
    fn estimators_reject_uncanonical_data() {
        let recs = vec![
            // Censored at visit 1 but carries covariate and outcome values.
            record("s1", "c1", vec![0.0], vec![1, 1], vec![1], vec![1], 3),
            record("s2", "c1", vec![0.0], vec![0, 0], vec![0], vec![1], 1),
        ];
        let d = Dataset::new(recs).unwrap();
        let scaler = OutcomeScaler::new(0.0, 1.0).unwrap();
        let opts = EstimatorOptions::default();
        let err = gcomp_sequential(
            &d,
            &Regimen::always(2),
            &LearnerSpec::logistic(),
            &scaler,
            &opts,
        )
        .unwrap_err();
        assert!(err.to_string().contains("impute_after_censoring"));
    }
}
