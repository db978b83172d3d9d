//! Python bindings for the longitudinal targeted-learning estimators: load
//! or simulate a dataset, apply a reporting scenario, and run any of the
//! estimators with cluster-aware intervals, mirroring the command-line
//! front end's semantics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use std::path::Path;

use longtmle::data::impute_after_censoring;
use longtmle::estimators::{
    contrast as contrast_estimates, Conditioning, Estimate, EstimatorOptions, OutcomeForm,
};
use longtmle::io::{load_dataset, write_dataset, LoadOptions, Schema};
use longtmle::sim::{
    apply_method, generate_dataset, oracle_contrast, DgpConfig, MethodKind, Scenario,
    METHOD_KEYS, SCENARIO_KEYS,
};
use longtmle::inference::wald_ci as wald_ci_rs;
use longtmle::{CoreError, Regimen};

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::InvalidData { .. } | CoreError::InvalidArgument { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A validated longitudinal dataset in canonical zero-imputed form.
#[pyclass(frozen)]
struct Dataset {
    inner: longtmle::Dataset,
}

#[pymethods]
impl Dataset {
    /// Loads a CSV in the canonical wide layout (or long with `long=True`),
    /// zero-imputing post-censoring columns if needed.
    #[staticmethod]
    #[pyo3(signature = (path, long = false))]
    fn from_csv(path: &str, long: bool) -> PyResult<Self> {
        let loaded = load_dataset(
            Path::new(path),
            &LoadOptions {
                schema: Schema::identity(),
                long,
                drop_incomplete_baseline: false,
            },
        )
        .map_err(to_py_err)?;
        let d = if loaded.dataset.is_canonical() {
            loaded.dataset
        } else {
            impute_after_censoring(&loaded.dataset)
        };
        Ok(Dataset { inner: d })
    }

    /// Draws one dataset from the calibrated generating process; `clusters`
    /// and `cluster_size` override the study defaults (31 x 150).
    #[staticmethod]
    #[pyo3(signature = (seed = 1, clusters = None, cluster_size = None))]
    fn generate(seed: u64, clusters: Option<usize>, cluster_size: Option<usize>) -> PyResult<Self> {
        let mut cfg = DgpConfig::study_default();
        if let Some(m) = clusters {
            cfg.clusters = m;
        }
        if let Some(s) = cluster_size {
            cfg.cluster_size = s;
        }
        cfg.validate().map_err(to_py_err)?;
        Ok(Dataset {
            inner: generate_dataset(&cfg, seed).map_err(to_py_err)?,
        })
    }

    /// Re-expresses the baseline covariates for one reporting scenario
    /// (`unmeasured`, `cluster_adjusted`, `fully_adjusted`, `transformed`).
    fn apply_scenario(&self, key: &str) -> PyResult<Self> {
        let sc = Scenario::parse(key).map_err(to_py_err)?;
        Ok(Dataset {
            inner: sc.apply(&self.inner).map_err(to_py_err)?,
        })
    }

    /// Writes the canonical wide CSV layout.
    fn to_csv(&self, path: &str) -> PyResult<()> {
        write_dataset(Path::new(path), &self.inner).map_err(to_py_err)
    }

    #[getter]
    fn subjects(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn clusters(&self) -> usize {
        self.inner.n_clusters()
    }

    #[getter]
    fn visits(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn baseline_covariates(&self) -> usize {
        self.inner.p()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} subjects, {} clusters, {} visits, {} baseline covariates)",
            self.inner.n(),
            self.inner.n_clusters(),
            self.inner.k(),
            self.inner.p()
        )
    }
}

struct Options {
    opts: EstimatorOptions,
    form: OutcomeForm,
}

#[allow(clippy::too_many_arguments)]
fn build_options(
    bootstrap: usize,
    seed: u64,
    conditioning: &str,
    truncation: f64,
    outcome_form: &str,
) -> PyResult<Options> {
    let conditioning = match conditioning {
        "subset" => Conditioning::Subset,
        "pooled" => Conditioning::Pooled,
        other => {
            return Err(PyValueError::new_err(format!(
                "conditioning {other:?} is not subset or pooled"
            )))
        }
    };
    let form = match outcome_form {
        "count_sum" => OutcomeForm::CountSum,
        "direct" => OutcomeForm::Direct,
        other => {
            return Err(PyValueError::new_err(format!(
                "outcome_form {other:?} is not count_sum or direct"
            )))
        }
    };
    Ok(Options {
        opts: EstimatorOptions {
            truncation_floor: truncation,
            conditioning,
            bootstrap,
            seed,
            ..EstimatorOptions::default()
        },
        form,
    })
}

fn estimate_dict(py: Python<'_>, method: MethodKind, target: &str, est: &Estimate) -> PyResult<Py<PyDict>> {
    let out = PyDict::new(py);
    let r = &est.report;
    out.set_item("method", method.key())?;
    out.set_item("target", target)?;
    out.set_item("estimate", r.psi)?;
    out.set_item("se", r.se)?;
    out.set_item("ci", (r.ci.0, r.ci.1))?;
    let interval = if est.ic.is_some() {
        "wald"
    } else if est.replicates.is_some() {
        "bootstrap_percentile"
    } else {
        "none"
    };
    out.set_item("interval", interval)?;
    let diag = PyDict::new(py);
    for (k, v) in &r.diagnostics {
        diag.set_item(k, *v)?;
    }
    out.set_item("diagnostics", diag)?;
    Ok(out.unbind())
}

/// Mean outcome under one fixed regimen, by any of the estimators.
#[pyfunction]
#[pyo3(signature = (dataset, method, regimen, bootstrap = 0, seed = 1,
                    conditioning = "subset", truncation = 0.005,
                    outcome_form = "count_sum"))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    py: Python<'_>,
    dataset: &Dataset,
    method: &str,
    regimen: &str,
    bootstrap: usize,
    seed: u64,
    conditioning: &str,
    truncation: f64,
    outcome_form: &str,
) -> PyResult<Py<PyDict>> {
    let mk = MethodKind::parse(method).map_err(to_py_err)?;
    let reg = Regimen::parse(regimen).map_err(to_py_err)?;
    let o = build_options(bootstrap, seed, conditioning, truncation, outcome_form)?;
    let est = apply_method(&dataset.inner, &reg, mk, o.form, &o.opts).map_err(to_py_err)?;
    estimate_dict(py, mk, &reg.to_string(), &est)
}

/// Difference of the mean outcomes under two regimens, minuend first. Both
/// arms share one bootstrap seed so G-computation replicates pair up.
#[pyfunction]
#[pyo3(signature = (dataset, method, regimen, baseline, bootstrap = 0, seed = 1,
                    conditioning = "subset", truncation = 0.005,
                    outcome_form = "count_sum"))]
#[allow(clippy::too_many_arguments)]
fn contrast(
    py: Python<'_>,
    dataset: &Dataset,
    method: &str,
    regimen: &str,
    baseline: &str,
    bootstrap: usize,
    seed: u64,
    conditioning: &str,
    truncation: f64,
    outcome_form: &str,
) -> PyResult<Py<PyDict>> {
    let mk = MethodKind::parse(method).map_err(to_py_err)?;
    let a = Regimen::parse(regimen).map_err(to_py_err)?;
    let b = Regimen::parse(baseline).map_err(to_py_err)?;
    let o = build_options(bootstrap, seed, conditioning, truncation, outcome_form)?;
    let ea = apply_method(&dataset.inner, &a, mk, o.form, &o.opts).map_err(to_py_err)?;
    let eb = apply_method(&dataset.inner, &b, mk, o.form, &o.opts).map_err(to_py_err)?;
    let diff = contrast_estimates(&ea, &eb, &dataset.inner).map_err(to_py_err)?;
    estimate_dict(py, mk, &format!("{a} vs {b}"), &diff)
}

/// True always-vs-never contrast of the calibrated generating process, by
/// paired Monte Carlo.
#[pyfunction]
#[pyo3(signature = (draws = 1_000_000, seed = 20_240_301))]
fn true_contrast(py: Python<'_>, draws: u64, seed: u64) -> PyResult<Py<PyDict>> {
    let cfg = DgpConfig::study_default();
    let est = oracle_contrast(
        &cfg,
        &Regimen::always(cfg.visits),
        &Regimen::never(cfg.visits),
        draws,
        seed,
    )
    .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("value", est.value)?;
    out.set_item("mc_se", est.mc_se)?;
    out.set_item("draws", est.n_mc)?;
    Ok(out.unbind())
}

/// 95% Wald interval from an estimate and its standard error.
#[pyfunction]
fn wald_ci(estimate: f64, se: f64) -> (f64, f64) {
    wald_ci_rs(estimate, se)
}

/// The nonlinear covariate disguise of the transformed scenario.
#[pyfunction]
fn kang_transform(w: f64, u: f64) -> (f64, f64) {
    longtmle::sim::kang_transform(w, u)
}

/// Keys accepted by `estimate` and `contrast`.
#[pyfunction]
fn methods(py: Python<'_>) -> PyResult<Py<PyList>> {
    Ok(PyList::new(py, METHOD_KEYS)?.unbind())
}

/// Keys accepted by `Dataset.apply_scenario`.
#[pyfunction]
fn scenarios(py: Python<'_>) -> PyResult<Py<PyList>> {
    Ok(PyList::new(py, SCENARIO_KEYS)?.unbind())
}

#[pymodule]
fn longtmle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(contrast, m)?)?;
    m.add_function(wrap_pyfunction!(true_contrast, m)?)?;
    m.add_function(wrap_pyfunction!(wald_ci, m)?)?;
    m.add_function(wrap_pyfunction!(kang_transform, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    Ok(())
}
