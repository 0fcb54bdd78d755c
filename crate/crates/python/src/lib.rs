//! Python bindings: datasets, the test, the competitors, the null sampler and
//! the simulation harness. Structured outputs are returned as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use profit_core::competitors::{run_zc_on, ZcConfig, ZcMethod};
use profit_core::data::{load_csv, IngestOptions};
use profit_core::plrt::{default_lambda_grid, simulate_null, NullSpectrum};
use profit_core::profit::{project_dataset, test_projections};
use profit_core::simstudy::{self, ExperimentConfig, Method, SimConfig};
use profit_core::{LongitudinalFunctionalDataset, ProfitConfig, ProfitError, ProfitReport};

fn py_err(e: ProfitError) -> PyErr {
    match e.root() {
        ProfitError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Longitudinal functional dataset with `s` and `t` rescaled to `[0, 1]`.
#[pyclass(name = "Dataset", module = "profit", frozen)]
struct PyDataset {
    inner: LongitudinalFunctionalDataset,
}

#[pymethods]
impl PyDataset {
    /// Load a long-format CSV (`subject_id, t, s, y` plus covariate columns).
    #[staticmethod]
    #[pyo3(signature = (path, covariates=None))]
    fn from_csv(path: PathBuf, covariates: Option<Vec<String>>) -> PyResult<Self> {
        let opts = IngestOptions {
            covariates,
            ..IngestOptions::default()
        };
        load_csv(&path, &opts).map(|inner| PyDataset { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        LongitudinalFunctionalDataset::from_json(text)
            .map(|inner| PyDataset { inner })
            .map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(&path).map_err(py_err)
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }

    #[getter]
    fn n_curves(&self) -> usize {
        self.inner.n_curves()
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid_s.clone()
    }

    #[getter]
    fn covariates(&self) -> Vec<String> {
        self.inner.covariate_names()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_subjects={}, n_curves={}, grid_len={})",
            self.inner.n_subjects(),
            self.inner.n_curves(),
            self.inner.grid_len()
        )
    }
}

/// Outcome of the test; `json` holds the full versioned report.
#[pyclass(name = "Report", module = "profit", frozen)]
struct PyReport {
    inner: ProfitReport,
    competitor: Option<String>,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn reject(&self) -> bool {
        self.inner.reject
    }

    #[getter]
    fn decision(&self) -> String {
        self.inner.decision.clone()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn p_values(&self) -> Vec<f64> {
        self.inner.directions.iter().map(|d| d.p_value).collect()
    }

    #[getter]
    fn statistics(&self) -> Vec<f64> {
        self.inner.directions.iter().map(|d| d.statistic).collect()
    }

    #[getter]
    fn min_p(&self) -> f64 {
        self.inner.min_p
    }

    #[getter]
    fn global_p(&self) -> f64 {
        self.inner.global_p
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.basis.eigenvalues.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Competitor result on the same projections, if one was requested.
    #[getter]
    fn competitor(&self) -> Option<String> {
        self.competitor.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn exit_code(&self) -> i32 {
        self.inner.exit_code()
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(decision={:?}, k={}, min_p={})",
            self.inner.decision, self.inner.k, self.inner.min_p
        )
    }
}

fn parse_method(s: &str) -> PyResult<Method> {
    Method::parse(s).map_err(py_err)
}

/// Test whether the mean changes over time. `method` may add "zc-mc" or
/// "zc-bt" on the same projections.
#[pyfunction]
#[pyo3(signature = (dataset, alpha=0.05, pve=0.9, pve_t=None, nsim=10_000, seed=0, covariates=None, max_k=15, method=None, bootstrap=1000))]
#[allow(clippy::too_many_arguments)]
fn run_test(
    py: Python<'_>,
    dataset: &PyDataset,
    alpha: f64,
    pve: f64,
    pve_t: Option<f64>,
    nsim: usize,
    seed: u64,
    covariates: Option<Vec<String>>,
    max_k: usize,
    method: Option<&str>,
    bootstrap: usize,
) -> PyResult<PyReport> {
    let zc_method = match method.map(parse_method).transpose()? {
        None | Some(Method::Profit) => None,
        Some(Method::ZcMc) => Some(ZcMethod::MonteCarlo),
        Some(Method::ZcBt) => Some(ZcMethod::Bootstrap),
    };
    let cfg = ProfitConfig {
        alpha,
        pve_s: pve,
        pve_t: pve_t.unwrap_or(pve),
        n_sim: nsim,
        seed,
        covariates: covariates.unwrap_or_default(),
        max_k,
        ..ProfitConfig::default()
    };
    let ds = &dataset.inner;
    py.detach(|| -> Result<PyReport, ProfitError> {
        cfg.validate()?;
        let proj = project_dataset(ds, &cfg)?;
        let inner = test_projections(ds, &proj, &cfg)?;
        let competitor = match zc_method {
            Some(m) => {
                let zc = ZcConfig {
                    b: bootstrap,
                    ..ZcConfig::default()
                };
                Some(run_zc_on(ds, &proj, m, &cfg, &zc)?.to_json()?)
            }
            None => None,
        };
        Ok(PyReport { inner, competitor })
    })
    .map_err(py_err)
}

/// Synthetic dataset from the simulation generator.
#[pyfunction]
#[pyo3(signature = (n=200, m_min=8, m_max=12, delta=0.0, seed=0, r=101))]
fn simulate(py: Python<'_>, n: usize, m_min: usize, m_max: usize, delta: f64, seed: u64, r: usize) -> PyResult<PyDataset> {
    let cfg = SimConfig {
        delta,
        seed,
        r,
        ..SimConfig::cell(n, m_min, m_max)
    };
    py.detach(|| simstudy::generate(&cfg))
        .map(|inner| PyDataset { inner })
        .map_err(py_err)
}

/// Draws from the asymptotic null given the two spectra.
#[pyfunction]
#[pyo3(signature = (zeta, xi, p=1, nsim=10_000, seed=0))]
fn null_dist(py: Python<'_>, zeta: Vec<f64>, xi: Vec<f64>, p: usize, nsim: usize, seed: u64) -> PyResult<Vec<f64>> {
    if zeta.len() != xi.len() {
        return Err(PyValueError::new_err("zeta and xi need the same length"));
    }
    let desc = |mut v: Vec<f64>| {
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let spectrum = NullSpectrum {
        xi: desc(xi),
        zeta: desc(zeta),
        p_tested: p,
    };
    let lambdas = default_lambda_grid(&spectrum.xi);
    py.detach(|| simulate_null(&spectrum, nsim, &lambdas, seed)).map_err(py_err)
}

/// Estimated marginal eigenbasis: `(eigenvalues, eigenfunctions)` with one
/// list per function on the dataset grid.
#[pyfunction]
#[pyo3(signature = (dataset, pve=0.9, max_k=15))]
fn basis(py: Python<'_>, dataset: &PyDataset, pve: f64, max_k: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let cfg = ProfitConfig {
        pve_s: pve,
        max_k,
        ..ProfitConfig::default()
    };
    let ds = &dataset.inner;
    let proj = py
        .detach(|| {
            cfg.validate()?;
            project_dataset(ds, &cfg)
        })
        .map_err(py_err)?;
    let b = &proj.basis;
    Ok((b.eigenvalues.clone(), (0..b.k()).map(|k| b.function(k)).collect()))
}

/// Empirical size (rejection rates under the null); returns the JSON result.
#[pyfunction]
#[pyo3(signature = (n=200, m_min=8, m_max=12, reps=400, seed=0, methods=None, alphas=None, nsim=10_000, fast_bootstrap=true))]
#[allow(clippy::too_many_arguments)]
fn size_experiment(
    py: Python<'_>,
    n: usize,
    m_min: usize,
    m_max: usize,
    reps: usize,
    seed: u64,
    methods: Option<Vec<String>>,
    alphas: Option<Vec<f64>>,
    nsim: usize,
    fast_bootstrap: bool,
) -> PyResult<String> {
    let methods = match methods {
        Some(ms) => ms.iter().map(|m| parse_method(m)).collect::<PyResult<Vec<_>>>()?,
        None => vec![Method::Profit],
    };
    let mut exp = ExperimentConfig {
        methods,
        reps,
        seed,
        profit: ProfitConfig {
            n_sim: nsim,
            seed,
            ..ProfitConfig::default()
        },
        zc: ZcConfig {
            fast_bootstrap,
            ..ZcConfig::default()
        },
        ..ExperimentConfig::default()
    };
    if let Some(a) = alphas {
        exp.alphas = a;
    }
    let cell = SimConfig::cell(n, m_min, m_max);
    py.detach(|| simstudy::run_size_experiment(&[cell], &exp)?.to_json())
        .map_err(py_err)
}

#[pymodule]
fn profit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(run_test, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(null_dist, m)?)?;
    m.add_function(wrap_pyfunction!(basis, m)?)?;
    m.add_function(wrap_pyfunction!(size_experiment, m)?)?;
    m.add("REPORT_SCHEMA", profit_core::profit::REPORT_SCHEMA)?;
    Ok(())
}
