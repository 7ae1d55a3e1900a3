//! Python bindings. JSON-valued results are returned as strings and decoded
//! by the pure-Python wrapper package.

use std::path::PathBuf;

use dgflow::{BumpActivation, BumpSum, BumpTerm, Error, Field, NetworkParams, Subcommand};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Normalized bump `w` on the unit ball.
#[pyclass(name = "Activation", module = "dgflow", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyActivation {
    inner: BumpActivation,
}

#[pymethods]
impl PyActivation {
    #[new]
    fn new(dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: BumpActivation::new(dim).map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn norm_const(&self) -> f64 {
        self.inner.norm_const()
    }

    fn __call__(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.inner.eval(&x))
    }

    fn grad(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        Ok(self.inner.grad_vec(&x))
    }
}

impl PyActivation {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!("expected a point of dimension {}", self.inner.dim())));
        }
        Ok(())
    }
}

/// One-hidden-layer bump network with clipped parameters.
#[pyclass(name = "Network", module = "dgflow", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: NetworkParams,
    act: BumpActivation,
}

#[pymethods]
impl PyNetwork {
    /// Draws `n` neurons from the initialization law.
    #[staticmethod]
    #[pyo3(signature = (n, dim, delta=0.75, clip_radius=None, seed=0))]
    fn init(n: usize, dim: usize, delta: f64, clip_radius: Option<f64>, seed: u64) -> PyResult<Self> {
        let r = clip_radius.unwrap_or((n as f64).ln());
        Ok(Self {
            inner: dgflow::init_params(n, dim, delta, r, seed).map_err(to_py)?,
            act: BumpActivation::new(dim).map_err(to_py)?,
        })
    }

    /// Loads a checkpoint written by `save` or by the command-line tool.
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        let (inner, _) = dgflow::checkpoint::load(&stem).map_err(to_py)?;
        let act = BumpActivation::new(inner.dim()).map_err(to_py)?;
        Ok(Self { inner, act })
    }

    #[pyo3(signature = (stem, seed=0))]
    fn save(&self, stem: PathBuf, seed: u64) -> PyResult<()> {
        dgflow::checkpoint::save(&self.inner, seed, &stem).map_err(to_py)?;
        Ok(())
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    #[getter]
    fn clip_radius(&self) -> f64 {
        self.inner.clip_radius()
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    /// Raw parameters, `(beta, alpha, c_1..c_d)` per neuron.
    fn params(&self) -> Vec<f64> {
        self.inner.flat()
    }

    fn with_params(&self, theta: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_flat(&theta).map_err(to_py)?,
            act: self.act,
        })
    }

    fn __call__(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.inner.eval(&self.act, &x))
    }

    fn grad(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        Ok(self.inner.spatial_grad(&self.act, &x))
    }

    fn __len__(&self) -> usize {
        self.inner.width()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(width={}, dim={}, delta={}, clip_radius={:.4})",
            self.inner.width(),
            self.inner.dim(),
            self.inner.delta(),
            self.inner.clip_radius()
        )
    }
}

impl PyNetwork {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!("expected a point of dimension {}", self.inner.dim())));
        }
        Ok(())
    }
}

fn bump_sum(dim: usize, terms: Vec<(f64, Vec<f64>, f64)>) -> PyResult<BumpSum> {
    let act = BumpActivation::new(dim).map_err(to_py)?;
    let terms = terms
        .into_iter()
        .map(|(amplitude, center, width)| BumpTerm { amplitude, center, width })
        .collect();
    BumpSum::new(act, terms).map_err(to_py)
}

/// Heat solution at `(t, x)` for initial data given as
/// `[(amplitude, center, width), ...]` bump terms.
#[pyfunction]
#[pyo3(signature = (terms, kappa, t, x, tol=1e-10))]
fn heat_exact(terms: Vec<(f64, Vec<f64>, f64)>, kappa: f64, t: f64, x: Vec<f64>, tol: f64) -> PyResult<f64> {
    let u0 = bump_sum(x.len(), terms)?;
    dgflow::heat_convolution(&u0, kappa, t, &x, tol, None).map_err(to_py)
}

/// Black–Scholes solution in log-price for bump initial data.
#[pyfunction]
#[pyo3(signature = (terms, sigma, r, t, x, tol=1e-10))]
fn bs_exact(terms: Vec<(f64, Vec<f64>, f64)>, sigma: f64, r: f64, t: f64, x: Vec<f64>, tol: f64) -> PyResult<f64> {
    let u0 = bump_sum(x.len(), terms)?;
    dgflow::bs_reference(sigma, r, &u0, t, &x, tol).map_err(to_py)
}

/// Initial condition value, for comparison with the solvers.
#[pyfunction]
fn bump_value(terms: Vec<(f64, Vec<f64>, f64)>, x: Vec<f64>) -> PyResult<f64> {
    Ok(bump_sum(x.len(), terms)?.value(&x))
}

/// Validated config with defaults filled in, as JSON.
#[pyfunction]
fn load_config_json(path: PathBuf) -> PyResult<String> {
    let cfg = dgflow::load_config(&path).map_err(to_py)?;
    serde_json::to_string(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs a subcommand and returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (subcommand, config, out, seed=None))]
fn run_json(py: Python<'_>, subcommand: &str, config: PathBuf, out: PathBuf, seed: Option<u64>) -> PyResult<String> {
    let sub: Subcommand = subcommand.parse().map_err(to_py)?;
    let mut cfg = dgflow::load_config(&config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = py.detach(|| dgflow::run(sub, &cfg, &out)).map_err(to_py)?;
    serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn _dgflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyActivation>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(heat_exact, m)?)?;
    m.add_function(wrap_pyfunction!(bs_exact, m)?)?;
    m.add_function(wrap_pyfunction!(bump_value, m)?)?;
    m.add_function(wrap_pyfunction!(load_config_json, m)?)?;
    m.add_function(wrap_pyfunction!(run_json, m)?)?;
    Ok(())
}
