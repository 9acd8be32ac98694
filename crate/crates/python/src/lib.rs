//! Python bindings: lattice domains, samplers, Green columns, the
//! experiment runner and the acceptance criteria.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use membrane_lab::field::{sampler_for, FieldSampler};
use membrane_lab::gmc::{GmcMeasure, SpectralGmc};
use membrane_lab::green::{green_solver, solve_green_column};
use membrane_lab::harness::config::{ExperimentConfig, ExperimentKind};
use membrane_lab::harness::experiments::run;
use membrane_lab::harness::split_stream;
use membrane_lab::harness::verify::criterion as run_criterion;
use membrane_lab::lattice::{bilaplacian_stencil as stencil, make_box, DyadicCube, LatticeDomain};
use membrane_lab::levelset;
use membrane_lab::solver::SolverOptions;
use membrane_lab::LabError;

fn py_err(e: LabError) -> PyErr {
    if e.is_solver_failure() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn solver_options(tol: Option<f64>, max_dense: Option<usize>) -> SolverOptions {
    let mut o = SolverOptions::default();
    if let Some(t) = tol {
        o = o.with_tol(t);
    }
    if let Some(m) = max_dense {
        o.max_dense = m;
    }
    o
}

/// A finite subset of Z^d.
#[pyclass(name = "Domain", frozen)]
struct PyDomain(Arc<LatticeDomain>);

#[pymethods]
impl PyDomain {
    /// The box {1, …, side−1}^dim.
    #[staticmethod]
    #[pyo3(name = "box")]
    fn box_(dim: usize, side: i64) -> PyResult<Self> {
        Ok(PyDomain(Arc::new(make_box(dim, side).map_err(py_err)?)))
    }

    /// The rectangle lo ≤ x ≤ hi (inclusive).
    #[staticmethod]
    fn region(lo: Vec<i64>, hi: Vec<i64>) -> PyResult<Self> {
        Ok(PyDomain(Arc::new(LatticeDomain::region(lo, hi).map_err(py_err)?)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn points(&self) -> Vec<Vec<i64>> {
        self.0.points().map(<[i64]>::to_vec).collect()
    }

    fn index_of(&self, p: Vec<i64>) -> Option<usize> {
        self.0.index_of(&p)
    }

    fn __repr__(&self) -> String {
        format!("Domain(dim={}, len={})", self.0.dim(), self.0.len())
    }
}

/// Exact sampler of the membrane field on a domain.
#[pyclass(name = "FieldSampler", frozen)]
struct PySampler(FieldSampler);

#[pymethods]
impl PySampler {
    #[new]
    #[pyo3(signature = (domain, tol=None, max_dense=None))]
    fn new(domain: &PyDomain, tol: Option<f64>, max_dense: Option<usize>) -> PyResult<Self> {
        Ok(PySampler(sampler_for(domain.0.clone(), &solver_options(tol, max_dense)).map_err(py_err)?))
    }

    #[getter]
    fn is_dense(&self) -> bool {
        self.0.is_dense()
    }

    /// Field values in domain order for stream (seed, experiment, replica).
    #[pyo3(signature = (seed, replica=0, experiment="python"))]
    fn sample(&self, py: Python<'_>, seed: u64, replica: u64, experiment: &str) -> PyResult<Vec<f64>> {
        let mut stream = split_stream(seed, experiment, replica, "field");
        py.detach(|| self.0.sample(&mut stream)).map(|h| h.values).map_err(py_err)
    }
}

/// A weighted point measure on lattice cells.
#[pyclass(name = "GmcMeasure", frozen)]
struct PyMeasure(GmcMeasure);

#[pymethods]
impl PyMeasure {
    fn total_mass(&self) -> f64 {
        self.0.total_mass()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    fn points(&self) -> Vec<Vec<i64>> {
        self.0.domain.points().map(<[i64]>::to_vec).collect()
    }

    fn write(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.0.write(&path).map_err(py_err)
    }

    #[staticmethod]
    fn read(path: std::path::PathBuf) -> PyResult<Self> {
        GmcMeasure::read(&path).map(PyMeasure).map_err(py_err)
    }
}

/// Δ² stencil as a list of (offset, coefficient).
#[pyfunction]
fn bilaplacian_stencil(dim: usize) -> Vec<(Vec<i64>, f64)> {
    stencil(dim).to_f64()
}

/// Column G(·, source) and its residual ‖A G − e‖∞.
#[pyfunction]
#[pyo3(signature = (domain, source, tol=None))]
fn green_column(py: Python<'_>, domain: &PyDomain, source: Vec<i64>, tol: Option<f64>) -> PyResult<(Vec<f64>, f64)> {
    let opts = solver_options(tol, None);
    let dom = domain.0.clone();
    py.detach(|| {
        let col = solve_green_column(&green_solver(dom, &opts)?, &source)?;
        Ok((col.values, col.residual))
    })
    .map_err(py_err)
}

/// a_N, K_N and k_N for level λ at side N, as a dict.
#[pyfunction]
fn scaling_params(py: Python<'_>, lam: f64, n: i64) -> PyResult<Py<PyAny>> {
    let p = levelset::scaling_params(lam, n, None).map_err(py_err)?;
    json_to_py(py, &serde_json::to_string(&p).expect("params serialize"))
}

/// One spectral chaos measure on the unit cube at resolution `side`
/// (`modes=None` uses every mode).
#[pyfunction]
#[pyo3(signature = (side, beta, seed, replica=0, modes=None))]
fn spectral_gmc(py: Python<'_>, side: i64, beta: f64, seed: u64, replica: u64, modes: Option<usize>) -> PyResult<PyMeasure> {
    py.detach(|| {
        let base = DyadicCube::unit(4);
        let gmc = match modes {
            None => SpectralGmc::full(base, side, beta, &SolverOptions::default())?,
            Some(k) => {
                let basis = membrane_lab::gmc::spectral_basis(Arc::new(make_box(4, side)?))?;
                SpectralGmc::from_basis(Arc::new(basis), base, side, beta, k)?
            }
        };
        gmc.sample(&mut split_stream(seed, "python-spectral", replica, "modes"))
    })
    .map(PyMeasure)
    .map_err(py_err)
}

/// Runs an experiment: `kind` is one of gamma-fit, gm-verify, census,
/// tail, gmc-ym, gmc-spectral, compare; `overrides` is a JSON object of
/// config fields. Returns the result set as a JSON string.
#[pyfunction]
#[pyo3(signature = (kind, overrides=None))]
fn run_experiment(py: Python<'_>, kind: &str, overrides: Option<&str>) -> PyResult<String> {
    let kind: ExperimentKind = serde_json::from_value(serde_json::Value::String(kind.into()))
        .map_err(|e| PyValueError::new_err(format!("unknown experiment kind: {e}")))?;
    let mut cfg = serde_json::to_value(ExperimentConfig::new(kind)).expect("config serializes");
    if let Some(o) = overrides {
        let o: serde_json::Value = serde_json::from_str(o).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let serde_json::Value::Object(o) = o else {
            return Err(PyValueError::new_err("overrides must be a JSON object"));
        };
        for (k, v) in o {
            cfg[k] = v;
        }
    }
    let cfg: ExperimentConfig = serde_json::from_value(cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.detach(|| run(&cfg)?.to_json()).map_err(py_err)
}

/// Acceptance criterion `id` (1–18): `(passed, line, values)`.
#[pyfunction]
#[pyo3(signature = (id, seed=0))]
fn criterion(py: Python<'_>, id: u32, seed: u64) -> PyResult<(bool, String, Py<PyAny>)> {
    let c = py.detach(|| run_criterion(id, seed, &SolverOptions::default())).map_err(py_err)?;
    let values = json_to_py(py, &serde_json::to_string(&c.values).expect("values serialize"))?;
    Ok((c.passed, c.line(), values))
}

fn json_to_py(py: Python<'_>, s: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

#[pymodule]
fn pymembrane(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDomain>()?;
    m.add_class::<PySampler>()?;
    m.add_class::<PyMeasure>()?;
    m.add_function(wrap_pyfunction!(bilaplacian_stencil, m)?)?;
    m.add_function(wrap_pyfunction!(green_column, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_params, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_gmc, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(criterion, m)?)?;
    Ok(())
}
