//! Python bindings. Structured results (reports, certificates, stage
//! outputs) cross the boundary as plain dicts and lists.

use std::path::Path;

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;
use torus_lab::experiment::{self, Body, ExperimentConfig, Stage};
use torus_lab::fourier::{self, FourierSeries2};
use torus_lab::kam::{self, KamInput};
use torus_lab::pendulum::{self, PendulumChart, Region};
use torus_lab::resonance::{self, AlphaRule, Annulus, Generator, ZoneDecomposition};
use torus_lab::scan::{self, ScanConfig};

fn py_err(e: torus_lab::Error) -> PyErr {
    if e.exit_code() == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn generator(k1: i64, k2: i64) -> PyResult<Generator> {
    Generator::new(k1, k2).map_err(py_err)
}

fn region(name: &str) -> PyResult<Region> {
    match name {
        "plus" => Ok(Region::Plus),
        "minus" => Ok(Region::Minus),
        "libration" => Ok(Region::Libration),
        _ => Err(PyValueError::new_err(format!("unknown region {name}"))),
    }
}

/// Real trigonometric polynomial on the 2-torus.
#[pyclass(name = "Potential", frozen)]
struct PyPotential {
    inner: FourierSeries2,
}

#[pymethods]
impl PyPotential {
    /// Builds from `(k1, k2, re, im)` entries, one per `±k` pair.
    #[new]
    fn new(s: f64, entries: Vec<(i64, i64, f64, f64)>) -> PyResult<Self> {
        let entries: Vec<([i64; 2], Complex64)> =
            entries.into_iter().map(|(a, b, re, im)| ([a, b], Complex64::new(re, im))).collect();
        Ok(Self {
            inner: FourierSeries2::from_entries(s, &entries).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn example(s: f64, delta: f64, kmax: usize) -> PyResult<Self> {
        Ok(Self {
            inner: fourier::make_example_potential(s, delta, kmax).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FourierSeries2::from_json_str(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.to_file()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn s(&self) -> f64 {
        self.inner.s()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn coeff(&self, k1: i64, k2: i64) -> Complex64 {
        self.inner.coeff([k1, k2])
    }

    fn __call__(&self, x1: f64, x2: f64) -> f64 {
        self.inner.eval([x1, x2])
    }

    fn gradient(&self, x1: f64, x2: f64) -> (f64, f64) {
        let g = self.inner.gradient([x1, x2]);
        (g[0], g[1])
    }

    /// Weighted sup-type norm `sum |f_k| e^{|k|_1 s}`.
    fn norm(&self, s: f64) -> PyResult<f64> {
        self.inner.norm_s(s).map_err(py_err)
    }

    /// Coefficients `F_j` of the restriction to the line of `(k1, k2)`.
    fn profile(&self, k1: i64, k2: i64) -> PyResult<Vec<(i64, Complex64)>> {
        let p = fourier::project_to_lattice(&self.inner, generator(k1, k2)?);
        Ok(p.coeffs.into_iter().collect())
    }

    #[pyo3(signature = (delta, kmax, c_universal = 2.0))]
    fn check_genericity<'py>(&self, py: Python<'py>, delta: f64, kmax: usize, c_universal: f64) -> PyResult<Bound<'py, PyAny>> {
        let cfg = fourier::GenericityConfig {
            c_universal,
            ..Default::default()
        };
        let rep = fourier::check_genericity(&self.inner, self.inner.s(), delta, kmax, &cfg).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("passed", rep.passed())?;
        out.set_item("report", to_py(py, &rep)?)?;
        Ok(out.into_any())
    }
}

/// Resonant zones of an annulus.
#[pyclass(name = "Zones", frozen)]
struct PyZones {
    inner: ZoneDecomposition,
}

#[pymethods]
impl PyZones {
    #[new]
    fn new(r: f64, r_outer: f64, alpha: f64, cutoff: usize) -> PyResult<Self> {
        let ann = Annulus::new(r, r_outer).map_err(py_err)?;
        Ok(Self {
            inner: ZoneDecomposition::new(ann, alpha, cutoff).map_err(py_err)?,
        })
    }

    /// Zones with `K = ceil(eps^-a)` and `alpha = r/(32K)`.
    #[staticmethod]
    fn for_eps(r: f64, r_outer: f64, eps: f64, a: f64) -> PyResult<Self> {
        let (alpha, k) = resonance::choose_parameters(r, eps, a, AlphaRule::Lemma).map_err(py_err)?;
        Self::new(r, r_outer, alpha, k)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn cutoff(&self) -> usize {
        self.inner.cutoff
    }

    /// `"D0"` or `"D1(k1,k2)..."`.
    fn classify(&self, y1: f64, y2: f64) -> PyResult<String> {
        Ok(self.inner.classify([y1, y2]).map_err(py_err)?.to_string())
    }
}

/// `|k|^2 p^2/2 + cos(q + theta)` in the unimodular frame of `k`.
#[pyclass(name = "ExactPendulum", frozen)]
struct PyExactPendulum {
    inner: PendulumChart,
}

#[pymethods]
impl PyExactPendulum {
    #[new]
    #[pyo3(signature = (k1, k2, theta = 0.0))]
    fn new(k1: i64, k2: i64, theta: f64) -> PyResult<Self> {
        Ok(Self {
            inner: PendulumChart::exact(generator(k1, k2)?, theta),
        })
    }

    fn separatrix_energy(&self) -> PyResult<f64> {
        self.inner.separatrix_energy(0.0).map_err(py_err)
    }

    /// Action of the level `energy` in `region` (`plus`, `minus`, `libration`).
    fn action(&self, region_name: &str, energy: f64) -> PyResult<f64> {
        self.inner.action_of_energy(region(region_name)?, energy, 0.0).map_err(py_err)
    }

    fn energy(&self, region_name: &str, action: f64) -> PyResult<f64> {
        self.inner.energy_of_action(region(region_name)?, action, 0.0).map_err(py_err)
    }

    /// Least-squares split `I = phi(z) + chi(z) z log z` near the separatrix.
    #[pyo3(signature = (region_name, z, deg_phi = 4, deg_chi = 4))]
    fn log_split<'py>(&self, py: Python<'py>, region_name: &str, z: Vec<f64>, deg_phi: usize, deg_chi: usize) -> PyResult<Bound<'py, PyAny>> {
        let fit = pendulum::log_split_fit(&self.inner, region(region_name)?, 0.0, &z, deg_phi, deg_chi).map_err(py_err)?;
        to_py(py, &fit)
    }
}

#[pyfunction]
fn enumerate_generators(kmax: usize) -> Vec<(i64, i64)> {
    resonance::enumerate_generators(kmax)
        .into_iter()
        .map(|g| (g.k1(), g.k2()))
        .collect()
}

#[pyfunction]
fn bezout_complement(k1: i64, k2: i64) -> PyResult<(i64, i64)> {
    let kbar = pendulum::bezout_complement(generator(k1, k2)?);
    Ok((kbar[0], kbar[1]))
}

#[pyfunction]
#[pyo3(signature = (m_hess, d_det, eps0, r, s, diam, tau = 1.5, c_kam = 1e-3))]
#[allow(clippy::too_many_arguments)]
fn kam_certificate<'py>(
    py: Python<'py>,
    m_hess: f64,
    d_det: f64,
    eps0: f64,
    r: f64,
    s: f64,
    diam: f64,
    tau: f64,
    c_kam: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let input = KamInput {
        tau,
        c_kam,
        ..KamInput::new(m_hess, d_det, eps0, r, s, diam)
    };
    to_py(py, &kam::evaluate(&input).map_err(py_err)?)
}

/// Orbit scan; `config` is a JSON object of scan settings (defaults filled in).
#[pyfunction]
#[pyo3(signature = (potential, eps, r, r_outer, config = "{}"))]
fn measure_scan<'py>(py: Python<'py>, potential: &PyPotential, eps: f64, r: f64, r_outer: f64, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ScanConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let ann = Annulus::new(r, r_outer).map_err(py_err)?;
    let f = potential.inner.clone();
    let (report, _) = py
        .detach(move || scan::measure_scan(&f, eps, &ann, &cfg))
        .map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn scaling_fit<'py>(py: Python<'py>, data: Vec<(f64, f64)>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &scan::scaling_fit(&data).map_err(py_err)?)
}

/// Runs an experiment stage on a JSON configuration; returns the exit code
/// and the JSON results by artifact name (CSV artifacts as text).
#[pyfunction]
#[pyo3(signature = (stage, config, workers = None, base_dir = "."))]
fn run_stage<'py>(py: Python<'py>, stage: &str, config: &str, workers: Option<usize>, base_dir: &str) -> PyResult<(i32, Bound<'py, PyDict>)> {
    let stage: Stage = stage.parse().map_err(py_err)?;
    let mut cfg = ExperimentConfig::from_json_str(config, Path::new(base_dir)).map_err(py_err)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let out = py.detach(|| experiment::run(stage, &cfg)).map_err(py_err)?;
    let results = PyDict::new(py);
    for a in &out.artifacts {
        match &a.body {
            Body::Json(v) => results.set_item(&a.name, to_py(py, v)?)?,
            Body::Csv(bytes) => results.set_item(&a.name, String::from_utf8_lossy(bytes).into_owned())?,
        }
    }
    Ok((out.exit_code(), results))
}

#[pymodule]
fn torus_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPotential>()?;
    m.add_class::<PyZones>()?;
    m.add_class::<PyExactPendulum>()?;
    m.add_function(wrap_pyfunction!(enumerate_generators, m)?)?;
    m.add_function(wrap_pyfunction!(bezout_complement, m)?)?;
    m.add_function(wrap_pyfunction!(kam_certificate, m)?)?;
    m.add_function(wrap_pyfunction!(measure_scan, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}
