//! Estimation of marginal treatment effects from longitudinal data with
//! informative censoring and clustered sampling.
//!
//! The observed data for one subject are
//! `(W, C_1, L_1, A_1, C_2, L_2, A_2, ..., A_{K-1}, C_K, Y)`: baseline
//! covariates `W`, then for each follow-up visit a censoring indicator `C_t`,
//! a binary time-varying covariate `L_t`, and a binary exposure `A_t`, ending
//! with an outcome `Y` measured at visit `K`. Both censoring and exposure are
//! monotone: once a subject is censored it stays censored, and once exposure
//! stops it does not restart. The target parameter is the mean outcome had
//! everyone followed a fixed exposure regimen and nobody been censored, and
//! differences of two such means.
//!
//! Four estimators are provided: likelihood-based G-computation,
//! sequential-regression G-computation, inverse probability of treatment and
//! censoring weighting (IPTW), and targeted maximum likelihood (TMLE).
//! Standard errors account for within-cluster dependence, either through a
//! clustered influence-curve variance or a pairs cluster bootstrap.
//!
//! The [`sim`] module contains the data-generating process used by the
//! simulation study harness, together with a Monte Carlo oracle for the true
//! counterfactual means and a calibration routine for the treatment effect.

pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod learners;
pub mod sim;

#[cfg(test)]
pub(crate) mod testutil;

pub use data::{Dataset, LongitudinalRecord, OutcomeScaler, Regimen};
pub use error::CoreError;

/// Numerically stable logistic function.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds; caller is responsible for `p` strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Splits one master seed into independent per-task seeds.
///
/// SplitMix64 finalizer over (seed, index); statistically independent streams
/// for distinct indices, stable across platforms and runs.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
