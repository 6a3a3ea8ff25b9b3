//! Python bindings: datasets, model fitting, curve prediction, residual
//! diagnostics and scenario simulation.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::smoothsde as core;
use core::basis::CovariateTable;
use core::data::IngestOptions;
use core::diagnostics::{StudyOptions, StudyReport};
use core::error::Error;
use core::inference::PredictOptions;
use core::sim::ScenarioConfig;

fn to_py(e: Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("invalid JSON: {e}"))
}

/// Tracking dataset: series IDs, times, responses and covariates.
#[pyclass(name = "Dataset", module = "smoothsde", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Build from columns. Responses may contain `None` for missing cells.
    #[new]
    #[pyo3(signature = (ids, times, responses, covariates = BTreeMap::new(), factors = BTreeMap::new()))]
    fn new(
        ids: Vec<String>,
        times: Vec<f64>,
        responses: BTreeMap<String, Vec<Option<f64>>>,
        covariates: BTreeMap<String, Vec<f64>>,
        factors: BTreeMap<String, Vec<String>>,
    ) -> PyResult<Self> {
        let inner = core::data::Dataset::new(
            ids,
            times,
            responses.into_iter().collect(),
            covariates.into_iter().collect(),
            factors.into_iter().collect(),
        )
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, responses, allow_missing_response = false))]
    fn from_csv(path: &str, responses: Vec<String>, allow_missing_response: bool) -> PyResult<Self> {
        let opts = IngestOptions {
            responses,
            allow_missing_response,
        };
        Ok(Self {
            inner: core::data::ingest_csv(path, &opts).map_err(to_py)?,
        })
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).map_err(to_py)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    fn response(&self, name: &str) -> PyResult<Vec<Option<f64>>> {
        Ok(self.inner.response(name).map_err(to_py)?.to_vec())
    }

    fn covariate(&self, name: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.covariate(name).map_err(to_py)?.to_vec())
    }
}

/// Model specification, built from the same JSON as the `model` section of
/// a CLI config.
#[pyclass(name = "ModelSpec", module = "smoothsde", from_py_object)]
#[derive(Clone)]
pub struct PyModelSpec {
    inner: core::inference::ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(json_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn family(&self) -> String {
        format!("{:?}", self.inner.family)
    }
}

/// Parameter curve with pointwise bands.
#[pyclass(name = "ParameterCurve", module = "smoothsde", get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct PyCurve {
    param: String,
    estimate: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    extrapolated: Vec<bool>,
}

/// Fitted model.
#[pyclass(name = "FitResult", module = "smoothsde", from_py_object)]
#[derive(Clone)]
pub struct PyFit {
    inner: core::inference::FitResult,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha.clone()
    }
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }
    #[getter]
    fn log_lambda(&self) -> Vec<f64> {
        self.inner.log_lambda.clone()
    }
    #[getter]
    fn fixed_labels(&self) -> Vec<String> {
        self.inner.fixed_labels.clone()
    }
    #[getter]
    fn marginal_nll(&self) -> f64 {
        self.inner.marginal_nll
    }
    #[getter]
    fn aic(&self) -> f64 {
        self.inner.aic
    }
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }
    #[getter]
    fn zeta(&self) -> f64 {
        self.inner.aux.zeta
    }

    fn standard_errors(&self) -> PyResult<Vec<f64>> {
        self.inner.standard_errors().map_err(to_py)
    }

    /// Curves on a covariate table given as `{name: values}`.
    #[pyo3(signature = (covariates, n_samples = 1000, level = 0.95, seed = 1))]
    fn predict(
        &self,
        covariates: BTreeMap<String, Vec<f64>>,
        n_samples: usize,
        level: f64,
        seed: u64,
    ) -> PyResult<Vec<PyCurve>> {
        let n = covariates.values().next().map_or(1, |v| v.len());
        let mut table = CovariateTable::new(n);
        for (k, v) in covariates {
            table = table.with_numeric(&k, v).map_err(to_py)?;
        }
        let opts = PredictOptions {
            n_samples,
            level,
            seed,
        };
        let curves = core::inference::predict_parameters(&self.inner, &table, &opts).map_err(to_py)?;
        Ok(curves
            .into_iter()
            .map(|c| PyCurve {
                param: c.param,
                estimate: c.estimate,
                lower: c.lower,
                upper: c.upper,
                extrapolated: c.extrapolated,
            })
            .collect())
    }

    /// Standardized residuals and their KS p-value against the reference
    /// distribution.
    fn residuals(&self, data: &PyDataset) -> PyResult<(Vec<f64>, f64)> {
        let r = core::diagnostics::residuals(&self.inner, &data.inner).map_err(to_py)?;
        let p = r.ks_test().p_value;
        Ok((r.values, p))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(json_err)?,
        })
    }
}

#[pyfunction]
fn fit(py: Python<'_>, spec: &PyModelSpec, data: &PyDataset) -> PyResult<PyFit> {
    let (s, d) = (spec.inner.clone(), data.inner.clone());
    let inner = py.detach(move || core::inference::fit(&s, &d)).map_err(to_py)?;
    Ok(PyFit { inner })
}

/// Simulate a scenario (JSON as in the `scenario` config section). Returns
/// the dataset and the true `(grid, r, s)` curves.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn simulate(scenario_json: &str) -> PyResult<(PyDataset, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let cfg: ScenarioConfig = serde_json::from_str(scenario_json).map_err(json_err)?;
    let sc = core::sim::run_scenario(&cfg).map_err(to_py)?;
    let (r, s) = sc.truth_on_grid();
    Ok((PyDataset { inner: sc.data }, cfg.grid(), r, s))
}

/// Replicate study; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (scenario_json, replicates = 200, n_draws = 1000, level = 0.95))]
fn coverage(py: Python<'_>, scenario_json: &str, replicates: usize, n_draws: usize, level: f64) -> PyResult<String> {
    let cfg: ScenarioConfig = serde_json::from_str(scenario_json).map_err(json_err)?;
    let opts = StudyOptions {
        replicates,
        n_draws,
        level,
    };
    let report: StudyReport = py
        .detach(move || core::diagnostics::replicate_study(&cfg, &opts))
        .map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Run the command-line interface with the given arguments (without the
/// program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("smoothsde".to_string()).chain(args).collect();
    py.detach(move || core::cli::run_cli(argv))
}

#[pymodule]
fn smoothsde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyFit>()?;
    m.add_class::<PyCurve>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
