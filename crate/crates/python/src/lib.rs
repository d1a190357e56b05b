//! Python bindings for `lorenz_lab`.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use lorenz_lab::evt;
use lorenz_lab::harness::{self, ExperimentConfig};
use lorenz_lab::maps::{self, Orbit};
use lorenz_lab::measure::MeasureOptions;
use lorenz_lab::rng::Domain;
use lorenz_lab::{LabError, ModelParams, SectionPoint, Seeder, Shape, System, SystemKind};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: LabError) -> PyErr {
    match e {
        LabError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn shape(name: &str) -> PyResult<Shape> {
    match name {
        "ball" => Ok(Shape::Ball),
        "square" => Ok(Shape::Square),
        _ => Err(PyValueError::new_err(format!("unknown shape {name:?} (ball or square)"))),
    }
}

fn system(name: &str, params: Option<&Params>) -> PyResult<System> {
    let kind = match name {
        "lorenz" => SystemKind::Lorenz,
        "baker" => SystemKind::Baker,
        "doubling" => SystemKind::Doubling,
        _ => return Err(PyValueError::new_err(format!("unknown system {name:?}"))),
    };
    System::from_kind(kind, params.map_or_else(ModelParams::default, |p| p.0)).map_err(err)
}

/// Constants of the geometric Lorenz model.
#[pyclass(name = "Params", module = "lorenz_lab", skip_from_py_object)]
#[derive(Clone)]
struct Params(ModelParams);

#[pymethods]
impl Params {
    #[new]
    #[pyo3(signature = (lambda1=1.0, lambda2=-2.0, lambda3=-0.6, theta=1.4, b0=-0.5, b1=0.5, g_kappa=1.0, g_c=0.25, tau0=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        lambda1: f64,
        lambda2: f64,
        lambda3: f64,
        theta: f64,
        b0: f64,
        b1: f64,
        g_kappa: f64,
        g_c: f64,
        tau0: f64,
    ) -> PyResult<Self> {
        let p = ModelParams {
            lambda1,
            lambda2,
            lambda3,
            theta,
            b0,
            b1,
            g_kappa,
            g_c,
            tau0,
        };
        p.validate().map_err(err)?;
        Ok(Self(p))
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta()
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    fn hash(&self) -> String {
        self.0.hash_hex()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

/// The two-dimensional return map `F(x, y) = (T(x), G(x, y))`.
#[pyclass(name = "LorenzMap", module = "lorenz_lab", skip_from_py_object)]
struct LorenzMap(maps::LorenzMap);

#[pymethods]
impl LorenzMap {
    #[new]
    #[pyo3(signature = (params=None))]
    fn new(params: Option<&Params>) -> PyResult<Self> {
        let p = params.map_or_else(ModelParams::default, |p| p.0);
        Ok(Self(maps::LorenzMap::new(p).map_err(err)?))
    }

    fn t(&self, x: f64) -> PyResult<f64> {
        self.0.t(x).map_err(err)
    }

    fn t_prime(&self, x: f64) -> PyResult<f64> {
        self.0.t_prime(x).map_err(err)
    }

    fn apply(&self, x: f64, y: f64) -> PyResult<(f64, f64)> {
        let q = self.0.apply(SectionPoint::new(x, y)).map_err(err)?;
        Ok((q.x, q.y))
    }

    fn return_time(&self, x: f64, y: f64) -> PyResult<f64> {
        self.0.return_time(SectionPoint::new(x, y)).map_err(err)
    }

    fn period_two_orbit(&self) -> PyResult<[(f64, f64); 2]> {
        let o = self.0.period_two_orbit().map_err(err)?;
        Ok(o.map(|p| (p.x, p.y)))
    }
}

/// First `n` points of the orbit of `(x, y)`; shorter if it hits the
/// singular line.
#[pyfunction]
#[pyo3(signature = (system_name, x, y, n, seed, params=None))]
fn orbit(system_name: &str, x: f64, y: f64, n: u64, seed: u64, params: Option<&Params>) -> PyResult<Vec<(f64, f64)>> {
    let s = system(system_name, params)?;
    let rng = Seeder::new(seed).stream(Domain::Trial, 0);
    let o = Orbit::from_point(s, SectionPoint::new(x, y), rng).map_err(err)?;
    Ok(o.take(n as usize).map(|p| (p.x, p.y)).collect())
}

/// Empirical invariant measure built from one long orbit.
#[pyclass(name = "EmpiricalMeasure", module = "lorenz_lab", skip_from_py_object)]
struct EmpiricalMeasure(lorenz_lab::EmpiricalMeasure);

#[pymethods]
impl EmpiricalMeasure {
    #[staticmethod]
    #[pyo3(signature = (system_name, n, seed, burn_in=1000, params=None))]
    fn build(system_name: &str, n: u64, seed: u64, burn_in: u64, params: Option<&Params>) -> PyResult<Self> {
        let s = system(system_name, params)?;
        let m = lorenz_lab::EmpiricalMeasure::build(s, n, burn_in, &Seeder::new(seed), MeasureOptions::default())
            .map_err(err)?;
        Ok(Self(m))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self(lorenz_lab::EmpiricalMeasure::read_snapshot(BufReader::new(f)).map_err(err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.0.write_snapshot(BufWriter::new(f)).map_err(err)
    }

    #[getter]
    fn total(&self) -> u64 {
        self.0.total()
    }

    #[pyo3(signature = (x, y, r, shape_name="ball"))]
    fn ball_mass(&self, x: f64, y: f64, r: f64, shape_name: &str) -> PyResult<f64> {
        Ok(self.0.ball_mass(SectionPoint::new(x, y), r, shape(shape_name)?))
    }

    fn annulus_mass(&self, x: f64, y: f64, r: f64, eps: f64) -> f64 {
        self.0.annulus_mass(SectionPoint::new(x, y), r, eps)
    }

    #[pyo3(signature = (x, y, mass, shape_name="ball"))]
    fn invert_mass(&self, x: f64, y: f64, mass: f64, shape_name: &str) -> PyResult<f64> {
        self.0.invert_mass(SectionPoint::new(x, y), mass, shape(shape_name)?).map_err(err)
    }

    /// Returns `(dimension, log_c, r_squared)`.
    fn local_dimension(&self, x: f64, y: f64, r_max: f64, r_min: f64) -> PyResult<(f64, f64, f64)> {
        let d = self.0.local_dimension(SectionPoint::new(x, y), r_max, r_min).map_err(err)?;
        Ok((d.dimension, d.log_c, d.r_squared))
    }

    fn quadrant_masses(&self) -> [f64; 4] {
        self.0.quadrant_masses()
    }
}

/// KS distance and p-value of `a (samples - b)` against the standard Gumbel law.
#[pyfunction]
fn gumbel_ks(samples: Vec<f64>, a: f64, b: f64) -> PyResult<(f64, f64)> {
    let r = evt::gumbel_ks(&samples, a, b).map_err(err)?;
    Ok((r.ks, r.p_value))
}

/// Checks a TOML experiment config; raises `ValueError` if invalid.
#[pyfunction]
#[pyo3(signature = (toml, seed=None))]
fn validate_config(toml: &str, seed: Option<u64>) -> PyResult<()> {
    let mut cfg = ExperimentConfig::from_toml(toml).map_err(err)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.validate().map_err(err)
}

/// Runs a TOML experiment config and returns its summary as JSON text.
/// Output files are written only when `write` is true.
#[pyfunction]
#[pyo3(signature = (toml, seed=None, write=false))]
fn run_experiment(py: Python<'_>, toml: &str, seed: Option<u64>, write: bool) -> PyResult<String> {
    let mut cfg = ExperimentConfig::from_toml(toml).map_err(err)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let rep = py.detach(|| harness::run(&cfg)).map_err(err)?;
    if write {
        rep.write(&cfg.output).map_err(err)?;
    }
    serde_json::to_string(&rep.summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "lorenz_lab")]
fn lorenz_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Params>()?;
    m.add_class::<LorenzMap>()?;
    m.add_class::<EmpiricalMeasure>()?;
    m.add_function(wrap_pyfunction!(orbit, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_ks, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
