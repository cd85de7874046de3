//! Python bindings. An `Experiment` is built from the same TOML the CLI
//! reads and exposes the solvers and estimates on it.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use yosida::estimates::{apriori_bound, lambda_convergence, lipschitz_dependence, EstimateReport};
use yosida::noise::{path_seed, sample_path};
use yosida::operators::{check_assumptions, check_hemicontinuity};
use yosida::{integrator, resolvent, Scheme};
use yosida_cli::config;

fn to_py(e: yosida::Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EstimateReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &r.name)?;
    d.set_item("t", r.t)?;
    d.set_item("lambda", r.lambda)?;
    d.set_item("lhs", r.lhs)?;
    d.set_item("rhs", r.rhs)?;
    d.set_item("slack", r.slack)?;
    d.set_item("stderr", r.stderr)?;
    d.set_item("margin", r.margin)?;
    d.set_item("pass", r.pass)?;
    Ok(d)
}

/// `(lambda, resolvent_defect, sup_error, drift_residual, diffusion_residual)`.
type ConvergenceRow = (f64, f64, f64, f64, f64);
/// `(times, lhs, rhs, pass)`.
type GronwallCurve = (Vec<f64>, Vec<f64>, Vec<f64>, bool);

#[pyclass(frozen, name = "Experiment")]
struct PyExperiment {
    inner: config::Experiment,
}

impl PyExperiment {
    fn mc(
        &self,
        paths: Option<usize>,
        dt: Option<f64>,
        jobs: usize,
    ) -> yosida::estimates::McConfig {
        let mut cfg = self.inner.mc_config(jobs);
        if let Some(p) = paths {
            cfg.paths = p;
        }
        if let Some(dt) = dt {
            cfg.dt = dt;
        }
        cfg
    }
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(toml: &str) -> PyResult<Self> {
        config::parse(toml)
            .map(|inner| PyExperiment { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_file(path: std::path::PathBuf) -> PyResult<Self> {
        config::load(&path)
            .map(|inner| PyExperiment { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.pair.dim()
    }

    #[getter]
    fn modes(&self) -> usize {
        self.inner.pair.modes()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.config.run.lambdas.clone()
    }

    fn h_norm(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.triple.h_norm(&x).map_err(to_py)
    }

    fn v_norm(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.triple.v_norm(&x).map_err(to_py)
    }

    fn drift(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.pair.eval_drift(t, &x).map_err(to_py)
    }

    /// `J_λ(t, x)`.
    fn resolve(&self, lam: f64, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let e = &self.inner;
        resolvent::resolve(
            &e.pair,
            &e.triple,
            lam,
            t,
            &x,
            &e.solver_options().resolvent,
        )
        .map(|s| s.point)
        .map_err(to_py)
    }

    /// `(x - J_λx)/λ`.
    fn yosida(&self, lam: f64, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let e = &self.inner;
        resolvent::yosida(
            &e.pair,
            &e.triple,
            lam,
            t,
            &x,
            &e.solver_options().resolvent,
        )
        .map_err(to_py)
    }

    /// One path driven by noise path `path_index`; returns `(times, states)`.
    #[pyo3(signature = (lam, scheme = None, path_index = 0))]
    fn solve(
        &self,
        lam: f64,
        scheme: Option<&str>,
        path_index: u64,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let e = &self.inner;
        let scheme = match scheme {
            None => e.scheme,
            Some(s) => Scheme::parse(s)
                .ok_or_else(|| PyValueError::new_err(format!("unknown scheme `{s}`")))?,
        };
        let run = &e.config.run;
        let noise = sample_path(
            path_seed(run.seed, path_index),
            run.dt,
            e.steps,
            e.pair.modes(),
        )
        .map_err(to_py)?;
        let path = integrator::solve(
            scheme,
            &e.pair,
            &e.triple,
            lam,
            &run.x0,
            &noise,
            &e.solver_options(),
        )
        .map_err(to_py)?;
        Ok((path.times, path.states))
    }

    #[pyo3(signature = (samples = None))]
    fn check_assumptions<'py>(
        &self,
        py: Python<'py>,
        samples: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let e = &self.inner;
        let n = samples.unwrap_or(e.config.run.samples);
        let rep = check_assumptions(&e.pair, &e.triple, n, e.config.run.seed).map_err(to_py)?;
        let hemi = check_hemicontinuity(&e.pair, &e.triple, n.min(64), e.config.run.seed)
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("joint_monotonicity", rep.min_joint_monotonicity_margin)?;
        d.set_item("coercivity", rep.min_coercivity_margin)?;
        d.set_item("growth_violation", rep.max_growth_violation)?;
        d.set_item("hemicontinuity_jump", hemi.worst_jump)?;
        d.set_item("pass", rep.pass && hemi.pass)?;
        Ok(d)
    }

    #[pyo3(signature = (lam, paths = None, dt = None, jobs = 1))]
    fn apriori<'py>(
        &self,
        py: Python<'py>,
        lam: f64,
        paths: Option<usize>,
        dt: Option<f64>,
        jobs: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let e = &self.inner;
        let reports =
            apriori_bound(&e.pair, &e.triple, lam, &self.mc(paths, dt, jobs)).map_err(to_py)?;
        reports.iter().map(|r| report_dict(py, r)).collect()
    }

    /// Rows of `(lambda, resolvent_defect, sup_error, drift_residual,
    /// diffusion_residual)` and the overall verdict.
    #[pyo3(signature = (paths = None, dt = None, jobs = 1))]
    fn convergence(
        &self,
        paths: Option<usize>,
        dt: Option<f64>,
        jobs: usize,
    ) -> PyResult<(Vec<ConvergenceRow>, bool)> {
        let e = &self.inner;
        let table = lambda_convergence(
            &e.pair,
            &e.triple,
            &e.config.run.lambdas,
            &self.mc(paths, dt, jobs),
            &e.convergence_options(),
        )
        .map_err(to_py)?;
        let rows = table
            .rows
            .iter()
            .map(|r| {
                let c = r.columns();
                (r.lambda, c[0], c[1], c[2], c[3])
            })
            .collect();
        Ok((rows, table.pass))
    }

    /// `(times, lhs, rhs, pass)` of the Gronwall bound between `x0` and `x0_alt`.
    #[pyo3(signature = (paths = None, dt = None, jobs = 1))]
    fn lipschitz(
        &self,
        paths: Option<usize>,
        dt: Option<f64>,
        jobs: usize,
    ) -> PyResult<GronwallCurve> {
        let e = &self.inner;
        let alt = e
            .config
            .run
            .x0_alt
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("config has no run.x0_alt"))?;
        let rep = lipschitz_dependence(
            &e.pair,
            &e.triple,
            &e.config.run.x0,
            alt,
            &self.mc(paths, dt, jobs),
        )
        .map_err(to_py)?;
        Ok((rep.times, rep.lhs, rep.rhs, rep.pass))
    }
}

/// Flat `steps × modes` Brownian increments.
#[pyfunction]
fn sample_noise(seed: u64, dt: f64, steps: usize, modes: usize) -> PyResult<Vec<f64>> {
    sample_path(seed, dt, steps, modes)
        .map(|p| p.increments().to_vec())
        .map_err(to_py)
}

#[pyfunction]
fn list_instances() -> String {
    config::list_instances()
}

#[pymodule]
fn yosida_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(sample_noise, m)?)?;
    m.add_function(wrap_pyfunction!(list_instances, m)?)?;
    m.add("__version__", yosida::VERSION)?;
    Ok(())
}
