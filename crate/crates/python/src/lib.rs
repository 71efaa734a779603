//! Python bindings: data loading, simulation, fitting, model scoring and
//! partition metrics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tdlbm::config::Settings;
use tdlbm::datagen::{generate, ScenarioSpec};
use tdlbm::grid::{load_csv as load_grid, save_csv};
use tdlbm::msem::{self, FitResult};
use tdlbm::selection;
use tdlbm::sim_model::RandomEffectConfig;
use tdlbm::splines::{self as sp, SplineSpec};
use tdlbm::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) | Error::AllFailed(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn re_config(code: &str) -> PyResult<RandomEffectConfig> {
    code.parse().map_err(py_err)
}

/// A rows x columns table of curves.
#[pyclass(name = "CurveGrid", module = "tdlbm")]
#[derive(Clone)]
struct PyCurveGrid {
    inner: tdlbm::grid::CurveGrid,
}

#[pymethods]
impl PyCurveGrid {
    #[staticmethod]
    fn load_csv(path: &str) -> PyResult<Self> {
        Ok(PyCurveGrid {
            inner: load_grid(path).map_err(py_err)?,
        })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        save_csv(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn row_ids(&self) -> Vec<String> {
        self.inner.row_ids.clone()
    }

    #[getter]
    fn col_ids(&self) -> Vec<String> {
        self.inner.col_ids.clone()
    }

    /// Observed `(times, values)` of cell `(i, j)`.
    fn cell(&self, i: usize, j: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        if i >= self.inner.n() || j >= self.inner.d() {
            return Err(PyValueError::new_err("cell index out of range"));
        }
        Ok(self.inner.cell(i, j).observed().unzip())
    }

    fn __repr__(&self) -> String {
        format!("CurveGrid(n={}, d={})", self.inner.n(), self.inner.d())
    }
}

/// Estimates and partitions from a fit. Labels are zero-based.
#[pyclass(name = "Fit", module = "tdlbm")]
struct PyFit {
    inner: FitResult,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn z(&self) -> Vec<usize> {
        self.inner.z.clone()
    }

    #[getter]
    fn w(&self) -> Vec<usize> {
        self.inner.w.clone()
    }

    #[getter]
    fn pi(&self) -> Vec<f64> {
        self.inner.theta.pi.clone()
    }

    #[getter]
    fn rho(&self) -> Vec<f64> {
        self.inner.theta.rho.clone()
    }

    #[getter]
    fn loglik_trace(&self) -> Vec<f64> {
        self.inner.loglik_trace.clone()
    }

    #[getter]
    fn re_config(&self) -> String {
        self.inner.re_config.to_string()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Block `(k, l)` parameters as a dict.
    fn block<'py>(&self, py: Python<'py>, k: usize, l: usize) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        if k >= self.inner.theta.k() || l >= self.inner.theta.l() {
            return Err(PyValueError::new_err("block index out of range"));
        }
        let b = self.inner.theta.block(k, l);
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("beta", b.beta.clone())?;
        dict.set_item("mu_alpha", b.mu_alpha.to_vec())?;
        dict.set_item("sigma_alpha", b.sigma_alpha.to_vec())?;
        dict.set_item("sigma_eps", b.sigma_eps)?;
        Ok(dict)
    }

    /// Block mean shape `m(t; beta_kl)` at the given times.
    fn mean_curve(&self, k: usize, l: usize, times: Vec<f64>) -> PyResult<Vec<f64>> {
        if k >= self.inner.theta.k() || l >= self.inner.theta.l() {
            return Err(PyValueError::new_err("block index out of range"));
        }
        let shape = sp::ShapeFn::new(&self.inner.spline, &self.inner.theta.block(k, l).beta).map_err(py_err)?;
        Ok(times.iter().map(|&t| shape.value(t)).collect())
    }

    /// ICL at the estimates, scored with `mc_samples` draws per cell.
    #[pyo3(signature = (grid, mc_samples = 1000, seed = 0))]
    fn icl(&self, grid: &PyCurveGrid, mc_samples: usize, seed: u64) -> PyResult<f64> {
        selection::icl(&grid.inner, &self.inner, mc_samples, seed).map_err(py_err)
    }
}

/// B-spline basis matrix (rows = times) for a clamped knot sequence.
#[pyfunction]
#[pyo3(signature = (times, interior_knots, degree = 3, t_min = 0.0, t_max = 1.0))]
fn make_basis(times: Vec<f64>, interior_knots: usize, degree: usize, t_min: f64, t_max: f64) -> PyResult<Vec<Vec<f64>>> {
    let spec = SplineSpec::new(degree, interior_knots, t_min, t_max).map_err(py_err)?;
    let b = sp::make_basis(&spec, &times).map_err(py_err)?;
    Ok((0..b.rows()).map(|i| b.row(i).to_vec()).collect())
}

#[pyfunction]
fn ari(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    tdlbm::metrics::ari(&a, &b).map_err(py_err)
}

#[pyfunction]
fn cari(z1: Vec<usize>, w1: Vec<usize>, z2: Vec<usize>, w2: Vec<usize>) -> PyResult<f64> {
    tdlbm::metrics::cari(&z1, &w1, &z2, &w2).map_err(py_err)
}

#[pyfunction]
fn block_param_count(re_config_code: &str, basis_dim: usize) -> PyResult<usize> {
    Ok(selection::block_param_count(re_config(re_config_code)?, basis_dim))
}

#[pyfunction]
fn icl_value(loglik: f64, n: usize, d: usize, k: usize, l: usize, nu: usize) -> f64 {
    selection::icl_value(loglik, n, d, k, l, nu)
}

/// Simulated benchmark data with 4 x 3 blocks; returns `(grid, z, w)`.
#[pyfunction]
#[pyo3(signature = (n = 100, d = 20, t_points = 15, seed = 0))]
fn simulate(n: usize, d: usize, t_points: usize, seed: u64) -> PyResult<(PyCurveGrid, Vec<usize>, Vec<usize>)> {
    let mut spec = ScenarioSpec::scenario1(seed).with_size(n, d);
    spec.t_points = t_points;
    let sim = generate(&spec).map_err(py_err)?;
    Ok((PyCurveGrid { inner: sim.grid }, sim.z, sim.w))
}

/// Fits the model with `k` row and `l` column clusters. Unset options take
/// their defaults.
#[pyfunction]
#[pyo3(signature = (
    grid, k, l, re_config = "TFT", *, mc_samples = None, gibbs_sweeps = None, iterations = None,
    burn_in = None, n_starts = None, init = None, seed = None, knots = None, degree = None, threads = None
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    grid: &PyCurveGrid,
    k: usize,
    l: usize,
    re_config: &str,
    mc_samples: Option<usize>,
    gibbs_sweeps: Option<usize>,
    iterations: Option<usize>,
    burn_in: Option<usize>,
    n_starts: Option<usize>,
    init: Option<String>,
    seed: Option<u64>,
    knots: Option<usize>,
    degree: Option<usize>,
    threads: Option<usize>,
) -> PyResult<PyFit> {
    let settings = Settings {
        re_config: Some(re_config.to_string()),
        mc_samples,
        gibbs_sweeps,
        iterations,
        burn_in,
        n_starts,
        init,
        seed,
        knots,
        degree,
        threads,
        ..Settings::default()
    };
    let cfg = settings.resolve_with(k, l).map_err(py_err)?;
    let data = grid.inner.clone();
    let inner = py.detach(move || msem::run(&data, &cfg)).map_err(py_err)?;
    Ok(PyFit { inner })
}

#[pymodule]
#[pyo3(name = "tdlbm")]
fn tdlbm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCurveGrid>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(make_basis, m)?)?;
    m.add_function(wrap_pyfunction!(ari, m)?)?;
    m.add_function(wrap_pyfunction!(cari, m)?)?;
    m.add_function(wrap_pyfunction!(block_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(icl_value, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
