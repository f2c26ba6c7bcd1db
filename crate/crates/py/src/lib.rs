//! Python module `scala_opt`: experiment configs and runs, the rate
//! calculator, and sharpness / Moreau diagnostics on explicit quadratics.
//!
//! Structured results cross the boundary as plain dicts and lists.

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scala_core::diagnostics::{default_inner_lr, moreau_grad, rate_calculator, sharpness, SharpnessOptions, TheoryConstants};
use scala_core::harness::{self, RunOptions, RunOutput};
use scala_core::objective::Quadratic;
use scala_core::{optimizer, Tensor};

fn py_err(e: scala_core::Error) -> PyErr {
    use scala_core::Error as E;
    match e {
        _ if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        E::Config { .. } | E::InvalidArgument(_) | E::ShapeMismatch { .. } | E::IndexOutOfRange { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize + ?Sized>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let serde_json::Value::Object(map) = &mut value {
        *map = std::mem::take(map).into_iter().map(|(k, v)| (k.replace('_', "-"), v)).collect();
    }
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn square(matrix: &[Vec<f64>]) -> PyResult<Quadratic> {
    let n = matrix.len();
    if n == 0 || matrix.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("matrix must be square and non-empty"));
    }
    Quadratic::new(n, matrix.concat()).map_err(py_err)
}

/// Experiment configuration, parsed from TOML plus dotted `key=value` overrides.
#[pyclass(name = "ExperimentConfig", module = "scala_opt", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = "", overrides = None))]
    fn new(text: &str, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let inner = harness::ExperimentConfig::from_toml_str(text, &overrides.unwrap_or_default()).map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = None))]
    fn from_file(path: &str, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let inner = harness::ExperimentConfig::from_file(path, &overrides.unwrap_or_default()).map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    /// A copy with further overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let text = self.inner.to_toml_string().map_err(py_err)?;
        Self::new(&text, Some(overrides))
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(mode={:?}, seed={})", self.inner.mode.as_str(), self.inner.seed)
    }
}

/// Records, summary and final model of one run.
#[pyclass(name = "RunResult", module = "scala_opt")]
struct PyRun {
    inner: RunOutput,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summary)
    }

    #[getter]
    fn aborted(&self) -> bool {
        self.inner.summary.aborted.is_some()
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.records)
    }

    fn final_params(&self) -> Vec<f64> {
        self.inner.model.flat_params()
    }

    /// Writes metrics, summary and checkpoints into `dir`; returns the paths.
    fn write_artifacts(&self, dir: &str) -> PyResult<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let paths = harness::write_artifacts(&self.inner, std::path::Path::new(dir)).map_err(py_err)?;
        Ok(paths.iter().map(|p| p.display().to_string()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }
}

/// Runs one experiment with the GIL released.
#[pyfunction]
#[pyo3(signature = (config, threads = None))]
fn run_experiment(py: Python<'_>, config: &PyConfig, threads: Option<usize>) -> PyResult<PyRun> {
    let cfg = config.inner.clone();
    let out = py
        .detach(move || harness::run_experiment(&cfg, &RunOptions { threads }))
        .map_err(py_err)?;
    Ok(PyRun { inner: out })
}

/// Prescribed step size, batch size, bound and inner iterations for `steps`
/// outer iterations. Keys may use `_` or `-`.
#[pyfunction(name = "rate_calculator")]
fn py_rate_calculator<'py>(constants: &Bound<'py, PyAny>, steps: u64) -> PyResult<Bound<'py, PyAny>> {
    let consts: TheoryConstants = from_py(constants)?;
    let plan = rate_calculator(&consts, steps).map_err(py_err)?;
    to_py(constants.py(), &plan)
}

/// Dominant eigenvalue of a symmetric matrix via power iteration on
/// finite-difference Hessian-vector products of `0.5 x^T A x`.
#[pyfunction]
#[pyo3(signature = (matrix, seed = 0, max_iters = 1000, tol = 1e-10))]
fn quadratic_sharpness<'py>(
    py: Python<'py>,
    matrix: Vec<Vec<f64>>,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let q = square(&matrix)?;
    let opts = SharpnessOptions {
        max_iters,
        tol,
        ..SharpnessOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = sharpness(&q, &vec![0.0; matrix.len()], &opts, &mut rng).map_err(py_err)?;
    to_py(py, &res)
}

/// Moreau-envelope gradient of `0.5 z^T A z` at `x` with a single group.
#[pyfunction]
#[pyo3(signature = (matrix, x, alpha, inner_iters = 500, inner_lr = None))]
fn quadratic_moreau_grad<'py>(
    py: Python<'py>,
    matrix: Vec<Vec<f64>>,
    x: Vec<f64>,
    alpha: f64,
    inner_iters: usize,
    inner_lr: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let q = square(&matrix)?;
    let row_bound = matrix
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let lr = inner_lr.unwrap_or_else(|| default_inner_lr(&[alpha], row_bound));
    let res = moreau_grad(&q, &x, &[alpha], inner_iters, lr).map_err(py_err)?;
    to_py(py, &res)
}

/// One group-wise normalized step. `groups` are `(start, end)` ranges; returns
/// the new parameters and the step report.
#[pyfunction]
#[pyo3(signature = (params, grads, groups, lr, clip_lo, clip_hi))]
fn scala_step<'py>(
    py: Python<'py>,
    mut params: Vec<f64>,
    grads: Vec<f64>,
    groups: Vec<(usize, usize)>,
    lr: f64,
    clip_lo: f64,
    clip_hi: f64,
) -> PyResult<(Vec<f64>, Bound<'py, PyAny>)> {
    let ranges: Vec<_> = groups.into_iter().map(|(a, b)| a..b).collect();
    let report = optimizer::scala_step(&mut params, &ranges, &grads, lr, clip_lo, clip_hi).map_err(py_err)?;
    Ok((params, to_py(py, &report)?))
}

/// Projection onto the infinity-norm ball of radius `omega` around `center`.
#[pyfunction]
fn project(y: Vec<f64>, center: Vec<f64>, omega: f64) -> PyResult<Vec<f64>> {
    let p = scala_core::adversary::project(&Tensor::vector(y), &Tensor::vector(center), omega).map_err(py_err)?;
    Ok(p.into_data())
}

#[pymodule]
fn scala_opt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(py_rate_calculator, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_sharpness, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_moreau_grad, m)?)?;
    m.add_function(wrap_pyfunction!(scala_step, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
