//! Variance estimation for clustered longitudinal data: the efficient
//! influence curve, the clustered sandwich, Wald intervals, and the pairs
//! cluster bootstrap.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, OutcomeScaler, Regimen};
use crate::derive_seed;
use crate::error::{CoreError, Result};
use crate::estimators::{clever_covariate, PropensityFits, SequentialFits};

/// Two-sided 95% normal quantile used throughout reporting.
pub const Z_95: f64 = 1.96;

/// Per-subject efficient influence values on the outcome scale.
#[derive(Debug, Clone)]
pub struct InfluenceCurveValues {
    /// `n x (K+1)`; column 0 is the baseline component, column t the
    /// visit-t component.
    pub components: Array2<f64>,
    /// Row sums of `components`.
    pub total: Vec<f64>,
}

/// Evaluates the efficient influence curve at the targeted fit: the
/// baseline component is the innermost targeted surface minus the estimate,
/// and each visit contributes the clever covariate times the one-step
/// regression residual. Every column averages to zero at a TMLE solution.
pub fn efficient_influence_curve(
    d: &Dataset,
    reg: &Regimen,
    seq: &SequentialFits,
    prop: &PropensityFits,
    psi: f64,
    scaler: &OutcomeScaler,
) -> Result<InfluenceCurveValues> {
    let star = seq.qbar_star.as_ref().ok_or_else(|| {
        CoreError::invalid_argument(
            "efficient influence curve needs targeted surfaces; run the TMLE first",
        )
    })?;
    let n = d.n();
    let k = d.k();
    if star.nrows() != n || star.ncols() != k + 1 {
        return Err(CoreError::invalid_argument(
            "targeted surfaces do not match the dataset",
        ));
    }
    let range = scaler.range();
    let psi_scaled = scaler.scale(psi);
    let mut components = Array2::zeros((n, k + 1));
    for i in 0..n {
        components[[i, 0]] = (star[[i, 0]] - psi_scaled) * range;
    }
    for t in 1..=k {
        let g = clever_covariate(prop, d, reg, t)?;
        for i in 0..n {
            components[[i, t]] = g[i] * (star[[i, t]] - star[[i, t - 1]]) * range;
        }
    }
    let total = components.rows().into_iter().map(|r| r.sum()).collect();
    Ok(InfluenceCurveValues { components, total })
}

/// Clustered variance decomposition for a mean-zero influence curve.
#[derive(Debug, Clone)]
pub struct ClusterVariance {
    pub sigma2: f64,
    pub se: f64,
    /// Cluster ids in index order.
    pub clusters: Vec<String>,
    /// Mean within-cluster cross product over distinct pairs; zero for
    /// singleton clusters.
    pub rho: Vec<f64>,
    /// Mean squared influence value within each cluster.
    pub sigma2_within: Vec<f64>,
}

/// Sandwich variance of the mean of clustered influence values:
/// `(1/n^2) * sum over clusters of (within-cluster sum)^2`, reported along
/// with each cluster's pairwise covariance and marginal second moment.
pub fn clustered_sandwich(
    ic: &[f64],
    cluster_index: &BTreeMap<String, Vec<usize>>,
) -> Result<ClusterVariance> {
    let n = ic.len();
    if n == 0 {
        return Err(CoreError::invalid_argument("empty influence curve"));
    }
    if ic.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::invalid_argument(
            "influence curve contains non-finite values",
        ));
    }
    let mut seen = vec![false; n];
    let mut clusters = Vec::with_capacity(cluster_index.len());
    let mut rho = Vec::with_capacity(cluster_index.len());
    let mut sigma2_within = Vec::with_capacity(cluster_index.len());
    let mut acc = 0.0;
    for (id, members) in cluster_index {
        let nm = members.len();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for &i in members {
            if i >= n || seen[i] {
                return Err(CoreError::invalid_argument(
                    "cluster index does not partition the influence curve",
                ));
            }
            seen[i] = true;
            sum += ic[i];
            sumsq += ic[i] * ic[i];
        }
        clusters.push(id.clone());
        sigma2_within.push(sumsq / nm as f64);
        rho.push(if nm >= 2 {
            (sum * sum - sumsq) / (nm * (nm - 1)) as f64
        } else {
            0.0
        });
        acc += sum * sum;
    }
    if seen.iter().any(|&s| !s) {
        return Err(CoreError::invalid_argument(
            "cluster index does not partition the influence curve",
        ));
    }
    // Algebraically nonnegative; the max guards a -0.0 from rounding.
    let sigma2 = (acc / (n * n) as f64).max(0.0);
    Ok(ClusterVariance {
        sigma2,
        se: sigma2.sqrt(),
        clusters,
        rho,
        sigma2_within,
    })
}

/// Two-sided 95% Wald interval.
pub fn wald_ci(psi: f64, se: f64) -> (f64, f64) {
    (psi - Z_95 * se, psi + Z_95 * se)
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    /// Successful replicate estimates, in replicate order.
    pub replicates: Vec<f64>,
    /// Sample standard deviation of the replicates.
    pub se: f64,
    /// 2.5% and 97.5% percentile interval.
    pub percentile_ci: (f64, f64),
    pub failed: usize,
    pub requested: usize,
}

/// Pairs cluster bootstrap: resamples whole clusters with replacement,
/// relabeling each draw as its own pseudo-cluster so a cluster drawn twice
/// contributes twice to the resampled index. Replicates run in parallel but
/// their resampling seeds derive from the replicate index, so results do not
/// depend on scheduling. More than 10% failed replicates is an error.
pub fn pairs_cluster_bootstrap(
    d: &Dataset,
    b: usize,
    seed: u64,
    point: impl Fn(&Dataset) -> Result<f64> + Sync,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(CoreError::invalid_argument(
            "bootstrap needs at least two replicates",
        ));
    }
    let keys: Vec<&String> = d.cluster_index().keys().collect();
    let m = keys.len();
    let outcomes: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64 + 1));
            let mut records = Vec::with_capacity(d.n());
            for draw in 0..m {
                let key = keys[rng.random_range(0..m)];
                for &i in &d.cluster_index()[key] {
                    let mut rec = d.records()[i].clone();
                    rec.cluster_id = format!("bs{draw}");
                    rec.subject_id = format!("bs{draw}.{}", rec.subject_id);
                    records.push(rec);
                }
            }
            let resampled = Dataset::from_validated(records, d.k());
            point(&resampled).and_then(|v| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(CoreError::invalid_data("non-finite replicate estimate"))
                }
            })
        })
        .collect();
    let requested = b;
    let replicates: Vec<f64> = outcomes.iter().filter_map(|o| o.as_ref().ok().copied()).collect();
    let failed = requested - replicates.len();
    if failed * 10 > requested {
        return Err(CoreError::BootstrapFailures {
            failed,
            requested,
            limit: requested / 10,
        });
    }
    if replicates.len() < 2 {
        return Err(CoreError::invalid_data(
            "fewer than two successful bootstrap replicates",
        ));
    }
    let se = sample_sd(&replicates);
    let mut sorted = replicates.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite replicates"));
    let percentile_ci = (
        quantile_type7(&sorted, 0.025),
        quantile_type7(&sorted, 0.975),
    );
    Ok(BootstrapResult {
        replicates,
        se,
        percentile_ci,
        failed,
        requested,
    })
}

/// Linear-interpolation quantile (type 7) of an ascending-sorted slice.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level outside [0, 1]");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample standard deviation (denominator n - 1); NaN below two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::record;

    fn two_cluster_index() -> BTreeMap<String, Vec<usize>> {
        let mut idx = BTreeMap::new();
        idx.insert("a".to_string(), vec![0, 1]);
        idx.insert("b".to_string(), vec![2, 3]);
        idx
    }

    #[test]
    fn sandwich_matches_worked_example_exactly() {
        let idx = two_cluster_index();
        let v = clustered_sandwich(&[1.0, -1.0, 2.0, 0.0], &idx).unwrap();
        assert_eq!(v.sigma2, 0.25);
        assert_eq!(v.se, 0.5);
        // Cluster a: cross product 1 * (-1) = -1, second moment 1.
        // Cluster b: cross product 2 * 0 = 0, second moment 2.
        assert_eq!(v.clusters, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(v.rho[0], -1.0);
        assert_eq!(v.sigma2_within[0], 1.0);
        assert_eq!(v.rho[1], 0.0);
        assert_eq!(v.sigma2_within[1], 2.0);
    }

    #[test]
    fn sandwich_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = rng.random_range(2..6_usize);
            let mut idx = BTreeMap::new();
            let mut ic = Vec::new();
            for c in 0..m {
                let nm = rng.random_range(1..5_usize);
                let mut members = Vec::new();
                for _ in 0..nm {
                    members.push(ic.len());
                    ic.push(rng.random::<f64>() * 4.0 - 2.0);
                }
                idx.insert(format!("c{c}"), members);
            }
            let v = clustered_sandwich(&ic, &idx).unwrap();
            let n = ic.len() as f64;
            let mut brute = 0.0;
            for members in idx.values() {
                for &i in members {
                    for &j in members {
                        brute += ic[i] * ic[j];
                    }
                }
            }
            brute /= n * n;
            assert!((v.sigma2 - brute).abs() < 1e-12, "{} vs {brute}", v.sigma2);
        }
    }

    #[test]
    fn sandwich_rejects_partial_cluster_index() {
        let mut idx = BTreeMap::new();
        idx.insert("a".to_string(), vec![0]);
        assert!(clustered_sandwich(&[1.0, 2.0], &idx).is_err());
        let mut dup = BTreeMap::new();
        dup.insert("a".to_string(), vec![0, 0]);
        assert!(clustered_sandwich(&[1.0, 2.0], &dup).is_err());
    }

    #[test]
    fn wald_interval_matches_hand_value() {
        let (lo, hi) = wald_ci(-0.048, 0.018);
        assert!((lo - -0.08328).abs() < 1e-12);
        assert!((hi - -0.01272).abs() < 1e-12);
    }

    #[test]
    fn type7_quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&xs, 0.0), 1.0);
        assert_eq!(quantile_type7(&xs, 1.0), 4.0);
        assert_eq!(quantile_type7(&xs, 0.5), 2.5);
        // h = 3 * 0.025 = 0.075 -> 1 + 0.075 * 1.
        assert!((quantile_type7(&xs, 0.025) - 1.075).abs() < 1e-15);
    }

    fn toy_dataset() -> Dataset {
        // Six subjects in three clusters; y encodes the cluster so resampled
        // means identify which clusters were drawn.
        let recs = vec![
            record("s1", "u", vec![0.0], vec![0, 0], vec![0], vec![1], 1),
            record("s2", "u", vec![0.0], vec![0, 0], vec![0], vec![1], 1),
            record("s3", "v", vec![0.0], vec![0, 0], vec![0], vec![1], 2),
            record("s4", "v", vec![0.0], vec![0, 0], vec![0], vec![1], 2),
            record("s5", "x", vec![0.0], vec![0, 0], vec![0], vec![1], 4),
            record("s6", "x", vec![0.0], vec![0, 0], vec![0], vec![1], 4),
        ];
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn bootstrap_is_deterministic_and_pairs_across_targets() {
        let d = toy_dataset();
        let mean_y = |rd: &Dataset| {
            Ok(rd.records().iter().map(|r| f64::from(r.y)).sum::<f64>() / rd.n() as f64)
        };
        let a = pairs_cluster_bootstrap(&d, 20, 11, mean_y).unwrap();
        let b = pairs_cluster_bootstrap(&d, 20, 11, mean_y).unwrap();
        assert_eq!(a.replicates, b.replicates);
        assert_eq!(a.failed, 0);
        // A shifted target under the same seed sees the same resamples, so
        // replicate-wise differences are exactly the shift.
        let shifted = pairs_cluster_bootstrap(&d, 20, 11, |rd| mean_y(rd).map(|v| v + 5.0)).unwrap();
        for (x, y) in a.replicates.iter().zip(&shifted.replicates) {
            assert_eq!(y - x, 5.0);
        }
        // Resampled means stay inside the convex hull of cluster means.
        for v in &a.replicates {
            assert!((1.0..=4.0).contains(v));
        }
    }

    #[test]
    fn bootstrap_resamples_whole_clusters() {
        let d = toy_dataset();
        let check = |rd: &Dataset| {
            // Every pseudo-cluster must hold one intact original cluster:
            // two members with equal y.
            assert_eq!(rd.n(), 6);
            for members in rd.cluster_index().values() {
                assert_eq!(members.len(), 2);
                let ys: Vec<u32> = members.iter().map(|&i| rd.records()[i].y).collect();
                assert_eq!(ys[0], ys[1]);
            }
            Ok(0.0)
        };
        pairs_cluster_bootstrap(&d, 10, 3, check).unwrap();
    }

    #[test]
    fn bootstrap_fails_loudly_past_the_failure_cap() {
        let d = toy_dataset();
        let flaky = |rd: &Dataset| {
            let mean = rd.records().iter().map(|r| f64::from(r.y)).sum::<f64>() / rd.n() as f64;
            if mean > 1.5 {
                Err(CoreError::invalid_data("unlucky draw"))
            } else {
                Ok(mean)
            }
        };
        let err = pairs_cluster_bootstrap(&d, 40, 5, flaky).unwrap_err();
        assert!(matches!(err, CoreError::BootstrapFailures { .. }));
    }

    #[test]
    fn sample_sd_handles_short_inputs() {
        assert!(sample_sd(&[1.0]).is_nan());
        assert!((sample_sd(&[1.0, 3.0]) - std::f64::consts::SQRT_2).abs() < 1e-15);
    }
}
