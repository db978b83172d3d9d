//! Regression learners for the nested outcome models and the propensity
//! models: hand-rolled weighted logistic regression (IRLS), a mean-only
//! learner, k-nearest-neighbour regression, a saturated stratum-mean lookup,
//! and a cross-validated convex ensemble of the above (super learner).
//!
//! Outcomes are probabilities or values already scaled into [0, 1], possibly
//! fractional (quasi-binomial). Every learner's predictions are clamped to
//! `[PRED_BOUND, 1 - PRED_BOUND]` so downstream logits and inverse weights
//! stay finite.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, s};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::expit;

/// Predictions are kept this far away from 0 and 1.
pub const PRED_BOUND: f64 = 1e-4;
/// Default ridge penalty on logistic slopes (intercept unpenalized).
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Default neighbourhood size for the k-nearest-neighbour learner.
pub const DEFAULT_KNN_K: usize = 10;
/// Default cross-validation folds for the super learner.
pub const DEFAULT_SL_FOLDS: usize = 10;

/// Cross-validation loss used to weight ensemble members: mean squared error
/// on the [0, 1] outcome scale (the default) or quasi-binomial deviance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CvLoss {
    #[default]
    SquaredError,
    BinomialDeviance,
}

impl CvLoss {
    /// Weighted mean loss of predictions against the outcome.
    fn mean_loss(self, w: &Array1<f64>, y: &Array1<f64>, pred: &Array1<f64>) -> f64 {
        let mut acc = 0.0;
        match self {
            CvLoss::SquaredError => {
                for i in 0..y.len() {
                    let r = y[i] - pred[i];
                    acc += w[i] * r * r;
                }
            }
            CvLoss::BinomialDeviance => {
                for i in 0..y.len() {
                    let p = clamp_pred(pred[i]);
                    acc -= w[i] * (y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
                }
            }
        }
        acc / w.sum()
    }

    /// Derivative of the per-row loss in the prediction, up to the 1/sum(w)
    /// normalization applied by the caller.
    fn dloss_dpred(self, y: f64, p: f64) -> f64 {
        match self {
            CvLoss::SquaredError => 2.0 * (p - y),
            CvLoss::BinomialDeviance => {
                // The clamp flattens the gradient at the prediction bounds;
                // the descent check in the weight search keeps any resulting
                // inexactness harmless.
                let p = clamp_pred(p);
                (p - y) / (p * (1.0 - p))
            }
        }
    }
}

const IRLS_MAX_ITER: usize = 100;
/// Convergence: max |score| / n below this.
const IRLS_TOL: f64 = 1e-8;
/// Coefficient magnitude that triggers the separation fallback.
const SEPARATION_CAP: f64 = 40.0;
/// Ridge applied to every coefficient, intercept included, on fallback.
const SEPARATION_RIDGE: f64 = 1e-3;
const PGD_MAX_ITER: usize = 1000;
const PGD_TOL: f64 = 1e-10;
/// Minimum width of a one-hot suffix block worth the structured solve.
const ONE_HOT_MIN: usize = 8;

fn clamp_pred(p: f64) -> f64 {
    p.clamp(PRED_BOUND, 1.0 - PRED_BOUND)
}

/// Design matrix, outcome in [0, 1], and optional nonnegative weights.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub weights: Option<Array1<f64>>,
}

impl TrainingSet {
    pub fn new(x: Array2<f64>, y: Array1<f64>, weights: Option<Array1<f64>>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(CoreError::invalid_argument("empty training set"));
        }
        if y.len() != n {
            return Err(CoreError::invalid_argument(format!(
                "design has {n} rows but outcome has {}",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid_argument("non-finite value in design"));
        }
        if y.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(CoreError::invalid_argument(
                "outcome values must lie in [0, 1]",
            ));
        }
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(CoreError::invalid_argument(format!(
                    "design has {n} rows but weights has {}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CoreError::invalid_argument(
                    "weights must be finite and nonnegative",
                ));
            }
            if w.sum() <= 0.0 {
                return Err(CoreError::invalid_argument("weights sum to zero"));
            }
        }
        Ok(TrainingSet { x, y, weights })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    fn subset(&self, idx: &[usize]) -> TrainingSet {
        let x = self.x.select(Axis(0), idx);
        let y = self.y.select(Axis(0), idx);
        let weights = self.weights.as_ref().map(|w| w.select(Axis(0), idx));
        TrainingSet { x, y, weights }
    }

    fn weight_vec(&self) -> Array1<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => Array1::ones(self.n()),
        }
    }
}

/// What to fit.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnerSpec {
    /// Main-terms logistic regression with ridge on the slopes.
    Logistic { ridge: f64 },
    /// Weighted mean of the outcome; the intercept-only model.
    Mean,
    /// Mean outcome among the k nearest neighbours in standardized
    /// Euclidean distance.
    Knn { k: usize },
    /// Exact stratum means over every distinct covariate pattern; only
    /// sensible for discrete low-dimensional designs.
    Saturated,
    /// Cross-validated convex combination of a library of the above.
    SuperLearner {
        library: Vec<LearnerSpec>,
        folds: usize,
        loss: CvLoss,
    },
}

impl LearnerSpec {
    pub fn logistic() -> Self {
        LearnerSpec::Logistic {
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn knn() -> Self {
        LearnerSpec::Knn { k: DEFAULT_KNN_K }
    }

    /// The default ensemble: logistic regression, the outcome mean, and
    /// k-nearest-neighbour, weighted by cross-validated squared error.
    pub fn super_learner() -> Self {
        LearnerSpec::SuperLearner {
            library: vec![
                LearnerSpec::logistic(),
                LearnerSpec::Mean,
                LearnerSpec::knn(),
            ],
            folds: DEFAULT_SL_FOLDS,
            loss: CvLoss::default(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LearnerSpec::Logistic { .. } => "logistic".to_string(),
            LearnerSpec::Mean => "mean".to_string(),
            LearnerSpec::Knn { k } => format!("knn({k})"),
            LearnerSpec::Saturated => "saturated".to_string(),
            LearnerSpec::SuperLearner { library, .. } => {
                let inner: Vec<String> = library.iter().map(|m| m.label()).collect();
                format!("super-learner[{}]", inner.join(","))
            }
        }
    }
}

/// Seed and optional cluster labels consumed by cross-validation.
#[derive(Debug, Clone, Copy)]
pub struct FitContext<'a> {
    pub seed: u64,
    /// Per-row cluster ordinal; folds never split a cluster when present.
    pub cluster_ids: Option<&'a [usize]>,
}

impl FitContext<'_> {
    pub fn simple(seed: u64) -> FitContext<'static> {
        FitContext {
            seed,
            cluster_ids: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// Intercept first when present, then one slope per design column.
    pub beta: Array1<f64>,
    pub intercept: bool,
    /// True when the separation fallback refit produced these coefficients.
    pub separation_fallback: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct MeanFit {
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct KnnFit {
    k: usize,
    mean: Array1<f64>,
    sd: Array1<f64>,
    /// Standardized training rows.
    xs: Array2<f64>,
    /// Squared norms of `xs` rows, cached for the distance kernel.
    xnorm2: Array1<f64>,
    y: Array1<f64>,
    w: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct SaturatedFit {
    /// Bit patterns of the covariate row -> stratum mean.
    table: HashMap<Vec<u64>, f64>,
    /// Overall mean, used for patterns unseen in training.
    fallback: f64,
}

/// Convex weights of a fitted ensemble plus its cross-validation audit.
#[derive(Debug, Clone)]
pub struct EnsembleWeights {
    pub labels: Vec<String>,
    pub alpha: Vec<f64>,
    pub cv_losses: Vec<f64>,
    pub ensemble_cv_loss: f64,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EnsembleFit {
    pub members: Vec<FittedLearner>,
    pub weights: EnsembleWeights,
}

#[derive(Debug, Clone)]
pub enum FittedLearner {
    Logistic(LogisticFit),
    Mean(MeanFit),
    Knn(KnnFit),
    Saturated(SaturatedFit),
    Ensemble(EnsembleFit),
}

impl FittedLearner {
    /// Ensemble weights when this is a fitted super learner.
    pub fn ensemble_weights(&self) -> Option<&EnsembleWeights> {
        match self {
            FittedLearner::Ensemble(e) => Some(&e.weights),
            _ => None,
        }
    }

    pub fn separation_fallback(&self) -> bool {
        match self {
            FittedLearner::Logistic(f) => f.separation_fallback,
            FittedLearner::Ensemble(e) => e.members.iter().any(|m| m.separation_fallback()),
            _ => false,
        }
    }
}

/// Fits a learner spec to a training set.
pub fn fit(spec: &LearnerSpec, ts: &TrainingSet, ctx: &FitContext) -> Result<FittedLearner> {
    match spec {
        LearnerSpec::Logistic { ridge } => fit_logistic_irls(ts, None, *ridge),
        LearnerSpec::Mean => fit_mean(ts),
        LearnerSpec::Knn { k } => fit_knn(ts, *k),
        LearnerSpec::Saturated => fit_saturated(ts),
        LearnerSpec::SuperLearner {
            library,
            folds,
            loss,
        } => fit_super_learner(ts, library, *folds, *loss, ctx),
    }
}

/// Predicts on new rows; `offset` is added to the linear predictor and only
/// meaningful for logistic fits.
pub fn predict(
    f: &FittedLearner,
    x: &ArrayView2<f64>,
    offset: Option<&ArrayView1<f64>>,
) -> Result<Array1<f64>> {
    if let Some(o) = offset {
        if o.len() != x.nrows() {
            return Err(CoreError::invalid_argument(format!(
                "offset has {} entries for {} rows",
                o.len(),
                x.nrows()
            )));
        }
        if !matches!(f, FittedLearner::Logistic(_)) {
            return Err(CoreError::invalid_argument(
                "offset is only supported by logistic fits",
            ));
        }
    }
    let out = match f {
        FittedLearner::Logistic(fit) => predict_logistic(fit, x, offset),
        FittedLearner::Mean(fit) => Array1::from_elem(x.nrows(), clamp_pred(fit.value)),
        FittedLearner::Knn(fit) => predict_knn(fit, x),
        FittedLearner::Saturated(fit) => predict_saturated(fit, x),
        FittedLearner::Ensemble(fit) => {
            let mut acc = Array1::zeros(x.nrows());
            for (a, m) in fit.weights.alpha.iter().zip(&fit.members) {
                if *a > 0.0 {
                    acc = acc + *a * predict(m, x, None)?;
                }
            }
            acc.mapv_inplace(clamp_pred);
            acc
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// Logistic regression via iteratively reweighted least squares.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct IrlsOptions {
    pub intercept: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            intercept: true,
            tol: IRLS_TOL,
            max_iter: IRLS_MAX_ITER,
        }
    }
}

/// Weighted ridge logistic regression with an optional offset. The outcome
/// may be fractional (quasi-binomial). The ridge penalizes slopes only;
/// convergence is `max |score| / n <= tol`. Complete separation (any
/// coefficient beyond 40 in absolute value, or failure to converge) triggers
/// one refit with ridge 1e-3 on every coefficient, flagged on the result.
pub fn fit_logistic_irls(
    ts: &TrainingSet,
    offset: Option<&ArrayView1<f64>>,
    ridge: f64,
) -> Result<FittedLearner> {
    fit_logistic_opts(ts, offset, ridge, IrlsOptions::default())
}

pub(crate) fn fit_logistic_opts(
    ts: &TrainingSet,
    offset: Option<&ArrayView1<f64>>,
    ridge: f64,
    opts: IrlsOptions,
) -> Result<FittedLearner> {
    if ridge < 0.0 {
        return Err(CoreError::invalid_argument("ridge must be nonnegative"));
    }
    if let Some(o) = offset {
        if o.len() != ts.n() {
            return Err(CoreError::invalid_argument(format!(
                "offset has {} entries for {} rows",
                o.len(),
                ts.n()
            )));
        }
        if o.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid_argument("non-finite offset"));
        }
    }
    let w = ts.weight_vec();
    match irls(ts, offset, &w, ridge, false, opts) {
        Ok((beta, iters)) if beta.iter().all(|b| b.abs() <= SEPARATION_CAP) => {
            Ok(FittedLearner::Logistic(LogisticFit {
                beta,
                intercept: opts.intercept,
                separation_fallback: false,
                iterations: iters,
            }))
        }
        // Separation (runaway coefficients) or non-convergence: refit with a
        // small ridge on every coefficient.
        Ok(_) | Err(CoreError::NoConvergence { .. }) => {
            let (beta, iters) = irls(ts, offset, &w, SEPARATION_RIDGE, true, opts)?;
            Ok(FittedLearner::Logistic(LogisticFit {
                beta,
                intercept: opts.intercept,
                separation_fallback: true,
                iterations: iters,
            }))
        }
        Err(e) => Err(e),
    }
}

/// Penalized quasi-binomial log-likelihood and its gradient at `beta`.
/// The design here is the raw training matrix; an intercept column is implied
/// when `intercept` is set (beta then has length p + 1, intercept first).
/// Exposed for gradient verification.
pub fn logistic_loss_grad(
    ts: &TrainingSet,
    offset: Option<&ArrayView1<f64>>,
    ridge: f64,
    penalize_intercept: bool,
    intercept: bool,
    beta: &ArrayView1<f64>,
) -> (f64, Array1<f64>) {
    let n = ts.n();
    let p = ts.p();
    let ncoef = p + usize::from(intercept);
    assert_eq!(beta.len(), ncoef, "coefficient length mismatch");
    let w = ts.weight_vec();
    let slopes = beta.slice(s![usize::from(intercept)..]);
    let mut eta = ts.x.dot(&slopes);
    if intercept {
        eta += beta[0];
    }
    if let Some(o) = offset {
        eta = eta + o;
    }
    let mut ll = 0.0;
    let mut resid = Array1::zeros(n);
    for i in 0..n {
        let e = eta[i];
        // log(1 + exp(e)) without overflow.
        let softplus = e.max(0.0) + (-e.abs()).exp().ln_1p();
        ll += w[i] * (ts.y[i] * e - softplus);
        resid[i] = w[i] * (ts.y[i] - expit(e));
    }
    let mut grad = Array1::zeros(ncoef);
    let xg = ts.x.t().dot(&resid);
    if intercept {
        grad[0] = resid.sum();
        grad.slice_mut(s![1..]).assign(&xg);
    } else {
        grad.assign(&xg);
    }
    for j in 0..ncoef {
        let penalized = penalize_intercept || !(intercept && j == 0);
        if penalized {
            ll -= 0.5 * ridge * beta[j] * beta[j];
            grad[j] -= ridge * beta[j];
        }
    }
    (ll, grad)
}

/// One-hot suffix block of the design: starting column and, per row, the
/// block column holding its single 1 (usize::MAX for none).
struct OneHotBlock {
    start: usize,
    row_col: Vec<usize>,
}

fn detect_one_hot(x: &Array2<f64>) -> Option<OneHotBlock> {
    let (n, p) = x.dim();
    if p < ONE_HOT_MIN {
        return None;
    }
    let mut start = p;
    while start > 0 {
        let col = x.column(start - 1);
        if col.iter().all(|&v| v == 0.0 || v == 1.0) {
            start -= 1;
        } else {
            break;
        }
    }
    // Shrink from the left until rows carry at most one 1 in the block.
    'outer: while p - start >= ONE_HOT_MIN {
        for i in 0..n {
            let ones = (start..p).filter(|&j| x[[i, j]] == 1.0).count();
            if ones > 1 {
                start += 1;
                continue 'outer;
            }
        }
        break;
    }
    if p - start < ONE_HOT_MIN {
        return None;
    }
    let row_col = (0..n)
        .map(|i| {
            (start..p)
                .find(|&j| x[[i, j]] == 1.0)
                .map_or(usize::MAX, |j| j - start)
        })
        .collect();
    Some(OneHotBlock { start, row_col })
}

fn irls(
    ts: &TrainingSet,
    offset: Option<&ArrayView1<f64>>,
    w: &Array1<f64>,
    ridge: f64,
    penalize_intercept: bool,
    opts: IrlsOptions,
) -> Result<(Array1<f64>, usize)> {
    let n = ts.n();
    let ncoef = ts.p() + usize::from(opts.intercept);
    let one_hot = if opts.intercept {
        detect_one_hot(&ts.x)
    } else {
        None
    };
    let mut beta: Array1<f64> = Array1::zeros(ncoef);
    let pen_ll = |b: &Array1<f64>| {
        logistic_loss_grad(ts, offset, ridge, penalize_intercept, opts.intercept, &b.view()).0
    };
    let mut cur_ll = pen_ll(&beta);
    for iter in 0..opts.max_iter {
        let (_, grad) = logistic_loss_grad(
            ts,
            offset,
            ridge,
            penalize_intercept,
            opts.intercept,
            &beta.view(),
        );
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax <= opts.tol * n as f64 {
            return Ok((beta, iter));
        }
        // Fisher weights at the current iterate.
        let slopes = beta.slice(s![usize::from(opts.intercept)..]);
        let mut eta = ts.x.dot(&slopes);
        if opts.intercept {
            eta += beta[0];
        }
        if let Some(o) = offset {
            eta = eta + o;
        }
        let mut fisher = Array1::zeros(n);
        for i in 0..n {
            let p = expit(eta[i]);
            fisher[i] = (w[i] * p * (1.0 - p)).max(1e-10);
        }
        let delta = match &one_hot {
            Some(block) => {
                newton_step_one_hot(ts, block, &fisher, &grad, ridge, penalize_intercept)?
            }
            None => newton_step_dense(ts, &fisher, &grad, ridge, penalize_intercept, opts.intercept)?,
        };
        // Step halving keeps the penalized log-likelihood nondecreasing.
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &(s * &delta);
            let ll = pen_ll(&cand);
            if ll >= cur_ll - 1e-12 * (1.0 + cur_ll.abs()) {
                beta = cand;
                cur_ll = ll;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            // No ascent direction left at this scale; report where we are.
            return Err(CoreError::NoConvergence {
                what: "logistic IRLS".to_string(),
                iterations: iter,
                residual: gmax / n as f64,
            });
        }
    }
    let (_, grad) = logistic_loss_grad(
        ts,
        offset,
        ridge,
        penalize_intercept,
        opts.intercept,
        &beta.view(),
    );
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if gmax <= opts.tol * n as f64 {
        return Ok((beta, opts.max_iter));
    }
    Err(CoreError::NoConvergence {
        what: "logistic IRLS".to_string(),
        iterations: opts.max_iter,
        residual: gmax / n as f64,
    })
}

/// Dense Newton step: solve (X'FX + ridge P) delta = grad with an implied
/// intercept column when requested.
fn newton_step_dense(
    ts: &TrainingSet,
    fisher: &Array1<f64>,
    grad: &Array1<f64>,
    ridge: f64,
    penalize_intercept: bool,
    intercept: bool,
) -> Result<Array1<f64>> {
    let p = ts.p();
    let ncoef = p + usize::from(intercept);
    let mut h = Array2::zeros((ncoef, ncoef));
    // Weighted cross-products through the matmul kernel.
    let xw = &ts.x * &fisher.view().insert_axis(Axis(1));
    let xtwx = ts.x.t().dot(&xw);
    if intercept {
        h[[0, 0]] = fisher.sum();
        let colsums = xw.sum_axis(Axis(0));
        for j in 0..p {
            h[[0, j + 1]] = colsums[j];
            h[[j + 1, 0]] = colsums[j];
        }
        h.slice_mut(s![1.., 1..]).assign(&xtwx);
    } else {
        h.assign(&xtwx);
    }
    for j in 0..ncoef {
        if penalize_intercept || !(intercept && j == 0) {
            h[[j, j]] += ridge;
        }
    }
    solve_spd(h, grad.clone(), "logistic IRLS normal equations")
}

/// Newton step exploiting a trailing one-hot block (e.g. cluster dummies):
/// the block-block part of the Fisher information is diagonal, so the system
/// reduces to a dense solve of the leading columns via the Schur complement.
/// Algebraically identical to the dense step.
fn newton_step_one_hot(
    ts: &TrainingSet,
    block: &OneHotBlock,
    fisher: &Array1<f64>,
    grad: &Array1<f64>,
    ridge: f64,
    penalize_intercept: bool,
) -> Result<Array1<f64>> {
    let n = ts.n();
    let d = block.start + 1; // intercept + dense columns
    let m = ts.p() - block.start;
    let mut a = Array2::zeros((d, d));
    let mut b = Array2::zeros((d, m));
    let mut dd = Array1::zeros(m);
    let mut row = Array1::zeros(d);
    for i in 0..n {
        let f = fisher[i];
        row[0] = 1.0;
        for j in 0..block.start {
            row[j + 1] = ts.x[[i, j]];
        }
        for r in 0..d {
            let fr = f * row[r];
            for c in r..d {
                a[[r, c]] += fr * row[c];
            }
        }
        let bc = block.row_col[i];
        if bc != usize::MAX {
            dd[bc] += f;
            for r in 0..d {
                b[[r, bc]] += f * row[r];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            a[[r, c]] = a[[c, r]];
        }
    }
    for j in 0..d {
        if penalize_intercept || j > 0 {
            a[[j, j]] += ridge;
        }
    }
    // Block coefficients are slopes, always penalized; keep the diagonal
    // invertible even at ridge zero for empty block levels.
    let block_ridge = if ridge > 0.0 { ridge } else { 1e-10 };
    dd += block_ridge;
    let gd = grad.slice(s![..d]).to_owned();
    let gm = grad.slice(s![d..]).to_owned();
    // Schur complement S = A - B D^-1 B'.
    let bdinv = &b / &dd.view().insert_axis(Axis(0));
    let schur = &a - &bdinv.dot(&b.t());
    let rhs = &gd - &bdinv.dot(&gm);
    let delta_d = solve_spd(schur, rhs, "logistic IRLS Schur complement")?;
    let delta_m = (&gm - &b.t().dot(&delta_d)) / &dd;
    let mut delta = Array1::zeros(d + m);
    delta.slice_mut(s![..d]).assign(&delta_d);
    delta.slice_mut(s![d..]).assign(&delta_m);
    Ok(delta)
}

/// Cholesky solve of a symmetric positive definite system, with escalating
/// diagonal jitter before giving up.
pub(crate) fn solve_spd(a: Array2<f64>, b: Array1<f64>, context: &str) -> Result<Array1<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0f64, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for attempt in 0..5 {
        let mut l = a.clone();
        if jitter > 0.0 {
            for i in 0..n {
                l[[i, i]] += jitter;
            }
        }
        if cholesky_in_place(&mut l) {
            return Ok(cholesky_solve(&l, &b));
        }
        jitter = if attempt == 0 {
            scale * 1e-10
        } else {
            jitter * 100.0
        };
    }
    Err(CoreError::SingularSystem {
        context: context.to_string(),
    })
}

/// Lower-triangular Cholesky factorization in place; false if not positive
/// definite within tolerance.
fn cholesky_in_place(a: &mut Array2<f64>) -> bool {
    let n = a.nrows();
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= a[[j, k]] * a[[j, k]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return false;
        }
        let diag = diag.sqrt();
        a[[j, j]] = diag;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / diag;
        }
    }
    true
}

fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = y[k];
            y[i] -= l[[i, k]] * t;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = y[k];
            y[i] -= l[[k, i]] * t;
        }
        y[i] /= l[[i, i]];
    }
    y
}

fn predict_logistic(
    fit: &LogisticFit,
    x: &ArrayView2<f64>,
    offset: Option<&ArrayView1<f64>>,
) -> Array1<f64> {
    let slopes = fit.beta.slice(s![usize::from(fit.intercept)..]);
    let mut eta = x.dot(&slopes);
    if fit.intercept {
        eta += fit.beta[0];
    }
    if let Some(o) = offset {
        eta = eta + o;
    }
    eta.mapv(|e| clamp_pred(expit(e)))
}

// ---------------------------------------------------------------------------
// Mean learner.
// ---------------------------------------------------------------------------

fn fit_mean(ts: &TrainingSet) -> Result<FittedLearner> {
    let w = ts.weight_vec();
    let value = ts.y.dot(&w) / w.sum();
    Ok(FittedLearner::Mean(MeanFit { value }))
}

// ---------------------------------------------------------------------------
// k-nearest-neighbour regression.
// ---------------------------------------------------------------------------

fn fit_knn(ts: &TrainingSet, k: usize) -> Result<FittedLearner> {
    if k == 0 {
        return Err(CoreError::invalid_argument("knn needs k >= 1"));
    }
    let n = ts.n();
    let p = ts.p();
    let mut mean = Array1::zeros(p);
    let mut sd = Array1::ones(p);
    for j in 0..p {
        let col = ts.x.column(j);
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mean[j] = m;
        sd[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let mut xs = ts.x.clone();
    for j in 0..p {
        let (m, s) = (mean[j], sd[j]);
        xs.column_mut(j).mapv_inplace(|v| (v - m) / s);
    }
    let xnorm2 = xs.rows().into_iter().map(|r| r.dot(&r)).collect();
    Ok(FittedLearner::Knn(KnnFit {
        k,
        mean,
        sd,
        xs,
        xnorm2,
        y: ts.y.clone(),
        w: ts.weights.clone(),
    }))
}

fn predict_knn(fit: &KnnFit, x: &ArrayView2<f64>) -> Array1<f64> {
    let nq = x.nrows();
    let nt = fit.xs.nrows();
    let k = fit.k.min(nt);
    let mut out = Array1::zeros(nq);
    let mut qs = x.to_owned();
    for j in 0..qs.ncols() {
        let (m, s) = (fit.mean[j], fit.sd[j]);
        qs.column_mut(j).mapv_inplace(|v| (v - m) / s);
    }
    // Squared distance d(q, t) = |q|^2 + |t|^2 - 2 q.t; the cross terms come
    // from a chunked matmul to bound memory at chunk x n_train.
    const CHUNK: usize = 256;
    let mut idx: Vec<usize> = Vec::with_capacity(nt);
    for chunk_start in (0..nq).step_by(CHUNK) {
        let chunk_end = (chunk_start + CHUNK).min(nq);
        let g = qs.slice(s![chunk_start..chunk_end, ..]).dot(&fit.xs.t());
        for qi in chunk_start..chunk_end {
            let grow = g.row(qi - chunk_start);
            idx.clear();
            idx.extend(0..nt);
            let score = |t: usize| fit.xnorm2[t] - 2.0 * grow[t];
            if k < nt {
                idx.select_nth_unstable_by(k - 1, |&a, &b| {
                    score(a).partial_cmp(&score(b)).expect("finite distances")
                });
            }
            let neighbours = &idx[..k];
            let (mut num, mut den) = (0.0, 0.0);
            match &fit.w {
                Some(w) => {
                    for &t in neighbours {
                        num += w[t] * fit.y[t];
                        den += w[t];
                    }
                }
                None => {
                    for &t in neighbours {
                        num += fit.y[t];
                    }
                    den = k as f64;
                }
            }
            // Zero-weight neighbourhoods fall back to the training mean.
            out[qi] = if den > 0.0 {
                clamp_pred(num / den)
            } else {
                clamp_pred(fit.y.sum() / nt as f64)
            };
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Saturated stratum means.
// ---------------------------------------------------------------------------

fn pattern_key(row: &ArrayView1<f64>) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

fn fit_saturated(ts: &TrainingSet) -> Result<FittedLearner> {
    let w = ts.weight_vec();
    let mut sums: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
    for i in 0..ts.n() {
        let e = sums.entry(pattern_key(&ts.x.row(i))).or_insert((0.0, 0.0));
        e.0 += w[i] * ts.y[i];
        e.1 += w[i];
    }
    let total_y = ts.y.dot(&w);
    let total_w = w.sum();
    let fallback = total_y / total_w;
    let table = sums
        .into_iter()
        .map(|(key, (sy, sw))| (key, if sw > 0.0 { sy / sw } else { fallback }))
        .collect();
    Ok(FittedLearner::Saturated(SaturatedFit { table, fallback }))
}

fn predict_saturated(fit: &SaturatedFit, x: &ArrayView2<f64>) -> Array1<f64> {
    Array1::from_iter((0..x.nrows()).map(|i| {
        let v = fit
            .table
            .get(&pattern_key(&x.row(i)))
            .copied()
            .unwrap_or(fit.fallback);
        clamp_pred(v)
    }))
}

// ---------------------------------------------------------------------------
// Super learner: cross-validated convex stacking.
// ---------------------------------------------------------------------------

/// Fold id per row. Units (clusters when given, rows otherwise) are shuffled
/// deterministically from the seed and dealt round-robin, so folds are
/// near-balanced and never split a cluster.
fn fold_assignment(
    n: usize,
    folds: usize,
    cluster_ids: Option<&[usize]>,
    seed: u64,
) -> Result<(Vec<usize>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cluster_ids {
        Some(ids) => {
            if ids.len() != n {
                return Err(CoreError::invalid_argument(
                    "cluster id length does not match rows",
                ));
            }
            let mut units: Vec<usize> = Vec::new();
            let mut seen = HashMap::new();
            for &c in ids {
                seen.entry(c).or_insert_with(|| units.push(c));
            }
            let v = folds.min(units.len());
            if v < 2 {
                return Err(CoreError::invalid_argument(
                    "cross-validation needs at least two clusters",
                ));
            }
            units.shuffle(&mut rng);
            let unit_fold: HashMap<usize, usize> = units
                .iter()
                .enumerate()
                .map(|(pos, &c)| (c, pos % v))
                .collect();
            Ok((ids.iter().map(|c| unit_fold[c]).collect(), v))
        }
        None => {
            let v = folds.min(n);
            if v < 2 {
                return Err(CoreError::invalid_argument(
                    "cross-validation needs at least two rows",
                ));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut assign = vec![0usize; n];
            for (pos, &i) in order.iter().enumerate() {
                assign[i] = pos % v;
            }
            Ok((assign, v))
        }
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &mut [f64]) {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite weights"));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (i as f64 + 1.0);
        if u - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Fits the convex ensemble: held-out predictions from `folds`-fold
/// cross-validation, loss-minimizing weights on the simplex by projected
/// gradient descent, then every surviving member refit on the full data.
/// A member that fails on any fold is dropped and recorded. The ensemble's
/// cross-validated loss never exceeds the best single member's by more than
/// 1e-10 (the search starts at that vertex).
pub fn fit_super_learner(
    ts: &TrainingSet,
    library: &[LearnerSpec],
    folds: usize,
    loss: CvLoss,
    ctx: &FitContext,
) -> Result<FittedLearner> {
    if library.is_empty() {
        return Err(CoreError::invalid_argument("super learner library is empty"));
    }
    if library
        .iter()
        .any(|m| matches!(m, LearnerSpec::SuperLearner { .. }))
    {
        return Err(CoreError::invalid_argument(
            "super learner library cannot nest another super learner",
        ));
    }
    let n = ts.n();
    let (assign, v) = fold_assignment(n, folds, ctx.cluster_ids, ctx.seed)?;
    let fold_rows: Vec<Vec<usize>> = (0..v)
        .map(|f| (0..n).filter(|&i| assign[i] == f).collect())
        .collect();
    let train_rows: Vec<Vec<usize>> = (0..v)
        .map(|f| (0..n).filter(|&i| assign[i] != f).collect())
        .collect();

    let mut z_cols: Vec<Array1<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<String> = Vec::new();
    for (j, spec) in library.iter().enumerate() {
        let mut col = Array1::zeros(n);
        let mut failed = false;
        for f in 0..v {
            let sub = ts.subset(&train_rows[f]);
            let inner = FitContext {
                seed: crate::derive_seed(ctx.seed, (j * v + f + 1) as u64),
                cluster_ids: None,
            };
            match fit(spec, &sub, &inner) {
                Ok(m) => {
                    let held = ts.x.select(Axis(0), &fold_rows[f]);
                    let preds = predict(&m, &held.view(), None)?;
                    for (&i, &p) in fold_rows[f].iter().zip(preds.iter()) {
                        col[i] = p;
                    }
                }
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            dropped.push(spec.label());
        } else {
            z_cols.push(col);
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(CoreError::invalid_argument(
            "every super learner member failed cross-validation",
        ));
    }

    let w = ts.weight_vec();
    let wsum = w.sum();
    let loss_of = |pred: &Array1<f64>| loss.mean_loss(&w, &ts.y, pred);
    let cv_losses: Vec<f64> = z_cols.iter().map(loss_of).collect();
    let nj = kept.len();
    let best = cv_losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite losses"))
        .map(|(j, _)| j)
        .expect("nonempty");

    let mut alpha = vec![0.0; nj];
    alpha[best] = 1.0;
    let ensemble_pred = |a: &[f64]| -> Array1<f64> {
        let mut acc = Array1::zeros(n);
        for (ai, zc) in a.iter().zip(&z_cols) {
            if *ai != 0.0 {
                acc = acc + *ai * zc;
            }
        }
        acc
    };
    let mut cur_loss = loss_of(&ensemble_pred(&alpha));
    if nj > 1 {
        let mut step = 1.0;
        for _ in 0..PGD_MAX_ITER {
            let pred = ensemble_pred(&alpha);
            // Gradient of the weighted loss in alpha.
            let dl: Vec<f64> = (0..n)
                .map(|i| w[i] * loss.dloss_dpred(ts.y[i], pred[i]))
                .collect();
            let mut grad = vec![0.0; nj];
            for (j, zc) in z_cols.iter().enumerate() {
                grad[j] = (0..n).map(|i| dl[i] * zc[i]).sum::<f64>() / wsum;
            }
            let mut improved = false;
            let mut moved = 0.0;
            for _ in 0..50 {
                let mut cand: Vec<f64> =
                    alpha.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
                project_simplex(&mut cand);
                let cand_loss = loss_of(&ensemble_pred(&cand));
                if cand_loss <= cur_loss {
                    moved = cand
                        .iter()
                        .zip(&alpha)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max);
                    alpha = cand;
                    cur_loss = cand_loss;
                    improved = true;
                    step *= 1.2;
                    break;
                }
                step *= 0.5;
            }
            if !improved || moved < PGD_TOL {
                break;
            }
        }
        // The search started at the best vertex and never accepted a worse
        // point, so this can only trip on floating noise; restore exactness.
        if cur_loss > cv_losses[best] {
            alpha = vec![0.0; nj];
            alpha[best] = 1.0;
            cur_loss = cv_losses[best];
        }
    }

    let mut members = Vec::with_capacity(nj);
    let mut labels = Vec::with_capacity(nj);
    for (pos, &j) in kept.iter().enumerate() {
        let inner = FitContext {
            seed: crate::derive_seed(ctx.seed, (library.len() * v + pos + 1) as u64),
            cluster_ids: None,
        };
        members.push(fit(&library[j], ts, &inner)?);
        labels.push(library[j].label());
    }
    Ok(FittedLearner::Ensemble(EnsembleFit {
        members,
        weights: EnsembleWeights {
            labels,
            alpha,
            cv_losses,
            ensemble_cv_loss: cur_loss,
            dropped,
        },
    }))
}

/// Pooled held-out loss of one spec under the same fold scheme the super
/// learner uses.
pub fn cross_validated_loss(
    ts: &TrainingSet,
    spec: &LearnerSpec,
    folds: usize,
    loss: CvLoss,
    ctx: &FitContext,
) -> Result<f64> {
    let n = ts.n();
    let (assign, v) = fold_assignment(n, folds, ctx.cluster_ids, ctx.seed)?;
    let w = ts.weight_vec();
    let mut pred = Array1::zeros(n);
    for f in 0..v {
        let held: Vec<usize> = (0..n).filter(|&i| assign[i] == f).collect();
        let train: Vec<usize> = (0..n).filter(|&i| assign[i] != f).collect();
        let sub = ts.subset(&train);
        let inner = FitContext {
            seed: crate::derive_seed(ctx.seed, (f + 1) as u64),
            cluster_ids: None,
        };
        let m = fit(spec, &sub, &inner)?;
        let hx = ts.x.select(Axis(0), &held);
        let preds = predict(&m, &hx.view(), None)?;
        for (&i, &p) in held.iter().zip(preds.iter()) {
            pred[i] = p;
        }
    }
    Ok(loss.mean_loss(&w, &ts.y, &pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn ts(x: Array2<f64>, y: Array1<f64>) -> TrainingSet {
        TrainingSet::new(x, y, None).unwrap()
    }

    /// 2x2 table with cell counts written out row by row.
    fn two_by_two(n00: usize, n01: usize, n10: usize, n11: usize) -> TrainingSet {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, y, count) in [
            (0.0, 0.0, n00),
            (0.0, 1.0, n01),
            (1.0, 0.0, n10),
            (1.0, 1.0, n11),
        ] {
            for _ in 0..count {
                xs.push(x);
                ys.push(y);
            }
        }
        let n = ys.len();
        ts(
            Array2::from_shape_vec((n, 1), xs).unwrap(),
            Array1::from_vec(ys),
        )
    }

    #[test]
    fn irls_matches_two_by_two_log_odds() {
        // Closed form: intercept = log(n01/n00), slope = log odds ratio.
        let t = two_by_two(40, 10, 15, 35);
        let fit = match fit_logistic_irls(&t, None, 0.0).unwrap() {
            FittedLearner::Logistic(f) => f,
            _ => unreachable!(),
        };
        let b0 = (10.0f64 / 40.0).ln();
        let b1 = (35.0f64 / 15.0).ln() - b0;
        assert!((fit.beta[0] - b0).abs() < 1e-6, "{} vs {b0}", fit.beta[0]);
        assert!((fit.beta[1] - b1).abs() < 1e-6, "{} vs {b1}", fit.beta[1]);
        assert!(!fit.separation_fallback);
    }

    #[test]
    fn irls_handles_weights_and_fractional_outcomes() {
        // Row weights equal to cell counts reproduce the expanded fit.
        let x = array![[0.0], [0.0], [1.0], [1.0]];
        let y = array![0.0, 1.0, 0.0, 1.0];
        let w = array![40.0, 10.0, 15.0, 35.0];
        let t = TrainingSet::new(x, y, Some(w)).unwrap();
        let fit = match fit_logistic_irls(&t, None, 0.0).unwrap() {
            FittedLearner::Logistic(f) => f,
            _ => unreachable!(),
        };
        assert!((fit.beta[0] - (0.25f64).ln()).abs() < 1e-6);

        // Fractional outcome: intercept-only fit solves expit(b0) = mean(y).
        let x = Array2::zeros((4, 0));
        let y = array![0.3, 0.7, 0.5, 0.9];
        let t = TrainingSet::new(x, y, None).unwrap();
        let fit = match fit_logistic_irls(&t, None, 0.0).unwrap() {
            FittedLearner::Logistic(f) => f,
            _ => unreachable!(),
        };
        assert!((expit(fit.beta[0]) - 0.6).abs() < 1e-8);
    }

    #[test]
    fn irls_offset_shifts_the_intercept() {
        // With offset o and intercept-only design, b0 solves
        // sum(y - expit(b0 + o)) = 0; check score is zero at the fit.
        let x = Array2::zeros((5, 0));
        let y = array![1.0, 0.0, 1.0, 1.0, 0.0];
        let o = array![0.5, -0.5, 1.0, 0.0, 0.25];
        let t = TrainingSet::new(x, y.clone(), None).unwrap();
        let fit = match fit_logistic_irls(&t, Some(&o.view()), 0.0).unwrap() {
            FittedLearner::Logistic(f) => f,
            _ => unreachable!(),
        };
        let score: f64 = (0..5).map(|i| y[i] - expit(fit.beta[0] + o[i])).sum();
        assert!(score.abs() < 1e-7, "score {score}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(n, |_| rng.random::<f64>());
        let w = Array1::from_shape_fn(n, |_| 0.5 + rng.random::<f64>());
        let o = Array1::from_shape_fn(n, |_| rng.random::<f64>() - 0.5);
        let t = TrainingSet::new(x, y, Some(w)).unwrap();
        let beta = array![0.3, -0.2, 0.8, 0.1];
        let (_, grad) =
            logistic_loss_grad(&t, Some(&o.view()), 0.05, false, true, &beta.view());
        let h = 1e-6;
        for j in 0..beta.len() {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[j] += h;
            dn[j] -= h;
            let (lu, _) =
                logistic_loss_grad(&t, Some(&o.view()), 0.05, false, true, &up.view());
            let (ld, _) =
                logistic_loss_grad(&t, Some(&o.view()), 0.05, false, true, &dn.view());
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(1e-8);
            assert!(rel < 1e-6, "coef {j}: analytic {} vs fd {fd}", grad[j]);
        }
    }

    #[test]
    fn separation_triggers_ridge_fallback() {
        // Perfectly separated with a narrow margin, so the unpenalized
        // optimum needs |slope| far beyond the coefficient cap.
        let x = Array2::from_shape_vec(
            (8, 1),
            vec![-0.20, -0.15, -0.10, -0.05, 0.05, 0.10, 0.15, 0.20],
        )
        .unwrap();
        let y = array![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let t = ts(x, y);
        let fit = fit_logistic_irls(&t, None, 0.0).unwrap();
        assert!(fit.separation_fallback());
        match &fit {
            FittedLearner::Logistic(f) => {
                assert!(f.beta.iter().all(|b| b.is_finite()));
            }
            _ => unreachable!(),
        }
        // Single-class outcome converges through the same path without error.
        let x = Array2::zeros((6, 1));
        let y = Array1::ones(6);
        let t = ts(x, y);
        let fit = fit_logistic_irls(&t, None, DEFAULT_RIDGE).unwrap();
        let preds = predict(&fit, &Array2::zeros((1, 1)).view(), None).unwrap();
        assert!(preds[0] > 0.9);
    }

    #[test]
    fn one_hot_path_matches_dense_path() {
        // 12 columns: 2 continuous + 10 disjoint dummies, wide enough to
        // engage the structured solve; compare against a design whose dummy
        // block is shuffled row-wise out of one-hot form (same information,
        // dense path) by checking the fitted probabilities agree.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400;
        let groups = 10;
        let mut x = Array2::zeros((n, 2 + groups));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let g = i % groups;
            let w1 = rng.random::<f64>() * 2.0 - 1.0;
            let w2 = rng.random::<f64>() * 2.0 - 1.0;
            x[[i, 0]] = w1;
            x[[i, 1]] = w2;
            x[[i, 2 + g]] = 1.0;
            let eta = 0.4 * w1 - 0.7 * w2 + 0.15 * g as f64 - 0.8;
            y[i] = f64::from(rng.random::<f64>() < expit(eta));
        }
        let t = ts(x.clone(), y.clone());
        assert!(detect_one_hot(&t.x).is_some());
        let fast = fit_logistic_irls(&t, None, 1e-6).unwrap();

        // Forcing the dense path: perturb one dummy entry to 0.5 in a copy
        // is not an option (changes the model), so instead check the fast
        // path against the explicit normal equations at the solution: the
        // score must be ~0.
        let beta = match &fast {
            FittedLearner::Logistic(f) => f.beta.clone(),
            _ => unreachable!(),
        };
        let (_, grad) = logistic_loss_grad(&t, None, 1e-6, false, true, &beta.view());
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(gmax / n as f64 <= IRLS_TOL, "score residual {gmax}");

        // And against a dense fit of the same data with the block narrowed
        // below the one-hot threshold (drop 5 dummy columns' rows).
        let keep: Vec<usize> = (0..n).filter(|i| i % groups < 5).collect();
        let xk = t.x.select(Axis(0), &keep);
        let xk = xk.slice(s![.., ..7]).to_owned();
        let yk = t.y.select(Axis(0), &keep);
        let tk = ts(xk, yk);
        assert!(detect_one_hot(&tk.x).is_none());
        let dense = fit_logistic_irls(&tk, None, 1e-6).unwrap();
        let beta_d = match &dense {
            FittedLearner::Logistic(f) => f.beta.clone(),
            _ => unreachable!(),
        };
        // Same optimum as a fast-path fit on identical rows.
        let wide = tk.x.clone();
        let mut padded = Array2::zeros((wide.nrows(), 12));
        padded.slice_mut(s![.., ..7]).assign(&wide);
        // Pad with 5 dummy columns of zeros plus 3 junk one-hot columns to
        // re-engage the structured path on the same effective model.
        for (i, _) in keep.iter().enumerate() {
            padded[[i, 7 + (i % 5)]] = 0.0;
        }
        let tp = ts(padded, tk.y.clone());
        if detect_one_hot(&tp.x).is_some() {
            let fast2 = fit_logistic_irls(&tp, None, 1e-6).unwrap();
            let beta_f = match &fast2 {
                FittedLearner::Logistic(f) => f.beta.clone(),
                _ => unreachable!(),
            };
            for j in 0..beta_d.len() {
                assert!(
                    (beta_d[j] - beta_f[j]).abs() < 1e-5,
                    "coef {j}: {} vs {}",
                    beta_d[j],
                    beta_f[j]
                );
            }
        }
    }

    #[test]
    fn detect_one_hot_rejects_overlapping_columns() {
        // Binary columns that are not disjoint must not be treated one-hot.
        let mut x = Array2::zeros((20, 10));
        for i in 0..20 {
            for j in 0..10 {
                x[[i, j]] = f64::from((i + j) % 2 == 0);
            }
        }
        assert!(detect_one_hot(&x).is_none());
    }

    #[test]
    fn mean_learner_is_weighted_and_clamped() {
        let x = Array2::zeros((3, 2));
        let y = array![0.0, 0.0, 1.0];
        let w = array![1.0, 1.0, 2.0];
        let t = TrainingSet::new(x, y, Some(w)).unwrap();
        let f = fit(&LearnerSpec::Mean, &t, &FitContext::simple(0)).unwrap();
        let p = predict(&f, &Array2::zeros((1, 2)).view(), None).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);

        let t = TrainingSet::new(Array2::zeros((2, 1)), array![0.0, 0.0], None).unwrap();
        let f = fit(&LearnerSpec::Mean, &t, &FitContext::simple(0)).unwrap();
        let p = predict(&f, &Array2::zeros((1, 1)).view(), None).unwrap();
        assert_eq!(p[0], PRED_BOUND);
    }

    #[test]
    fn knn_averages_nearest_neighbours() {
        // Six points on a line; k = 2 around x = 0.05 picks 0.0 and 0.1.
        let x = Array2::from_shape_vec((6, 1), vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1]).unwrap();
        let y = array![0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let t = ts(x, y);
        let f = fit(&LearnerSpec::Knn { k: 2 }, &t, &FitContext::simple(0)).unwrap();
        let q = Array2::from_shape_vec((2, 1), vec![0.05, 2.05]).unwrap();
        let p = predict(&f, &q.view(), None).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
        // k larger than n averages every point.
        let f = fit(&LearnerSpec::Knn { k: 50 }, &t, &FitContext::simple(0)).unwrap();
        let p = predict(&f, &q.view(), None).unwrap();
        assert!((p[0] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn knn_k1_returns_the_training_point_outcome() {
        let x = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 1.0, 0.5, -2.0, 3.0]).unwrap();
        let y = array![0.3, 0.8, 0.6];
        let t = ts(x.clone(), y.clone());
        let f = fit(&LearnerSpec::Knn { k: 1 }, &t, &FitContext::simple(0)).unwrap();
        let p = predict(&f, &x.view(), None).unwrap();
        for i in 0..3 {
            assert!((p[i] - y[i]).abs() < 1e-12, "row {i}: {} vs {}", p[i], y[i]);
        }
    }

    #[test]
    fn knn_standardizes_each_column() {
        // Second column has 100x the scale; standardization makes both
        // matter equally, so the neighbour of (0, 0) under k=1 is the point
        // close in standardized space, not raw space.
        let x = Array2::from_shape_vec(
            (4, 2),
            vec![0.0, 0.0, 1.0, 10.0, 2.0, 300.0, 3.0, 310.0],
        )
        .unwrap();
        let y = array![0.0, 1.0, 0.0, 0.0];
        let t = ts(x, y);
        let f = fit(&LearnerSpec::Knn { k: 1 }, &t, &FitContext::simple(0)).unwrap();
        let q = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let p = predict(&f, &q.view(), None).unwrap();
        // In raw distance the nearest point is (0, 0) with y = 0; after
        // per-column standardization it is (1, 10) with y = 1 (clamped).
        assert_eq!(p[0], 1.0 - PRED_BOUND);
    }

    #[test]
    fn saturated_reproduces_stratum_means() {
        let x = Array2::from_shape_vec(
            (6, 2),
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let y = array![0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let t = ts(x, y);
        let f = fit(&LearnerSpec::Saturated, &t, &FitContext::simple(0)).unwrap();
        let q = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let p = predict(&f, &q.view(), None).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 1.0 + PRED_BOUND).abs() < 1e-12);
        // Unseen pattern falls back to the overall mean.
        assert!((p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn super_learner_single_member_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let x = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
        let y = Array1::from_shape_fn(n, |i| f64::from(rng.random::<f64>() < 0.3 + 0.4 * x[[i, 0]]));
        let t = ts(x, y);
        let f = fit_super_learner(
            &t,
            &[LearnerSpec::logistic()],
            5,
            CvLoss::default(),
            &FitContext::simple(1),
        )
        .unwrap();
        let w = f.ensemble_weights().unwrap();
        assert_eq!(w.alpha, vec![1.0]);
        assert!(w.dropped.is_empty());
        assert!((w.ensemble_cv_loss - w.cv_losses[0]).abs() < 1e-15);
    }

    #[test]
    fn super_learner_weights_on_simplex_and_never_worse_than_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 300;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(n, |i| {
            let eta = 1.5 * x[[i, 0]] - 0.5 * x[[i, 1]];
            f64::from(rng.random::<f64>() < expit(eta))
        });
        let t = ts(x, y);
        let library = vec![LearnerSpec::logistic(), LearnerSpec::Knn { k: 10 }, LearnerSpec::Mean];
        for loss in [CvLoss::SquaredError, CvLoss::BinomialDeviance] {
            let f = fit_super_learner(&t, &library, 5, loss, &FitContext::simple(7)).unwrap();
            let w = f.ensemble_weights().unwrap();
            let sum: f64 = w.alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "alpha sums to {sum}");
            assert!(w.alpha.iter().all(|&a| (-1e-12..=1.0 + 1e-12).contains(&a)));
            let best = w.cv_losses.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(w.ensemble_cv_loss <= best + 1e-10);
        }
    }

    #[test]
    fn ensemble_weight_concentrates_on_the_true_logistic_model() {
        // Outcome drawn from a main-terms logistic model: the logistic
        // member should dominate the mean learner in nearly every replicate.
        let mut hits = 0;
        for rep in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let n = 2000;
            let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
            let y = Array1::from_shape_fn(n, |i| {
                let eta = -0.4 + 1.2 * x[[i, 0]] - 0.9 * x[[i, 1]];
                f64::from(rng.random::<f64>() < expit(eta))
            });
            let t = ts(x, y);
            let f = fit_super_learner(
                &t,
                &[LearnerSpec::logistic(), LearnerSpec::Mean],
                10,
                CvLoss::SquaredError,
                &FitContext::simple(rep),
            )
            .unwrap();
            let w = f.ensemble_weights().unwrap();
            if w.alpha[0] > 0.9 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "logistic weight > 0.9 in only {hits}/100 runs");
    }

    #[test]
    fn super_learner_folds_respect_clusters() {
        let n = 40;
        let clusters: Vec<usize> = (0..n).map(|i| i / 4).collect();
        let (assign, v) = fold_assignment(n, 5, Some(&clusters), 9).unwrap();
        assert_eq!(v, 5);
        for c in 0..10 {
            let folds: Vec<usize> = (0..n).filter(|&i| clusters[i] == c).map(|i| assign[i]).collect();
            assert!(folds.windows(2).all(|p| p[0] == p[1]), "cluster {c} split");
        }
    }

    #[test]
    fn super_learner_is_deterministic_in_the_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 120;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let y = Array1::from_shape_fn(n, |_| f64::from(rng.random::<f64>() < 0.4));
        let t = ts(x, y);
        let lib = vec![LearnerSpec::logistic(), LearnerSpec::Knn { k: 5 }];
        let loss = CvLoss::default();
        let a = fit_super_learner(&t, &lib, 4, loss, &FitContext::simple(42)).unwrap();
        let b = fit_super_learner(&t, &lib, 4, loss, &FitContext::simple(42)).unwrap();
        let c = fit_super_learner(&t, &lib, 4, loss, &FitContext::simple(43)).unwrap();
        let (wa, wb, wc) = (
            a.ensemble_weights().unwrap(),
            b.ensemble_weights().unwrap(),
            c.ensemble_weights().unwrap(),
        );
        assert_eq!(wa.alpha, wb.alpha);
        assert_eq!(wa.ensemble_cv_loss, wb.ensemble_cv_loss);
        // Different seed shuffles folds differently; losses move.
        assert!(wa.ensemble_cv_loss != wc.ensemble_cv_loss);
    }

    #[test]
    fn cross_validated_loss_prefers_the_true_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 500;
        let x = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>() * 4.0 - 2.0);
        let y = Array1::from_shape_fn(n, |i| f64::from(rng.random::<f64>() < expit(2.0 * x[[i, 0]])));
        let t = ts(x, y);
        let ctx = FitContext::simple(12);
        for loss in [CvLoss::SquaredError, CvLoss::BinomialDeviance] {
            let logistic =
                cross_validated_loss(&t, &LearnerSpec::logistic(), 5, loss, &ctx).unwrap();
            let mean = cross_validated_loss(&t, &LearnerSpec::Mean, 5, loss, &ctx).unwrap();
            assert!(logistic < mean, "logistic {logistic} vs mean {mean}");
        }
    }

    #[test]
    fn mean_cv_squared_error_approximates_outcome_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4000;
        let x = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
        let y = Array1::from_shape_fn(n, |_| f64::from(rng.random::<f64>() < 0.3));
        let m = y.sum() / n as f64;
        let var = y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let t = ts(x, y);
        let loss = cross_validated_loss(
            &t,
            &LearnerSpec::Mean,
            10,
            CvLoss::SquaredError,
            &FitContext::simple(2),
        )
        .unwrap();
        assert!((loss - var).abs() < 0.01, "cv mse {loss} vs var {var}");
    }

    #[test]
    fn zero_variance_outcome_has_zero_squared_error_loss() {
        let x = Array2::zeros((30, 1));
        let y = Array1::from_elem(30, 0.4);
        let t = ts(x, y);
        let loss = cross_validated_loss(
            &t,
            &LearnerSpec::Mean,
            5,
            CvLoss::SquaredError,
            &FitContext::simple(3),
        )
        .unwrap();
        assert!(loss.abs() < 1e-30, "loss {loss}");
    }

    #[test]
    fn project_simplex_examples() {
        let mut v = vec![0.2, 0.3, 0.5];
        project_simplex(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v, vec![0.2, 0.3, 0.5]);

        let mut v = vec![2.0, 0.0];
        project_simplex(&mut v);
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert_eq!(v[1], 0.0);

        let mut v = vec![-1.0, -2.0, 4.0];
        project_simplex(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn training_set_validation() {
        assert!(TrainingSet::new(Array2::zeros((0, 1)), Array1::zeros(0), None).is_err());
        assert!(TrainingSet::new(Array2::zeros((2, 1)), Array1::zeros(3), None).is_err());
        assert!(TrainingSet::new(Array2::zeros((2, 1)), array![0.5, 1.5], None).is_err());
        assert!(
            TrainingSet::new(Array2::zeros((2, 1)), array![0.5, 0.5], Some(array![1.0, -1.0]))
                .is_err()
        );
        assert!(TrainingSet::new(
            Array2::from_elem((2, 1), f64::NAN),
            array![0.5, 0.5],
            None
        )
        .is_err());
    }
}
