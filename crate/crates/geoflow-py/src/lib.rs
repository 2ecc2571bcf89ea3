//! Python module `geoflow`: configuration, runs of the named commands,
//! trajectories and a few pointwise building blocks.

use std::path::PathBuf;

use geoflow_cli::config::RunConfig;
use geoflow_cli::report::Report as CliReport;
use geoflow_cli::{experiments, Command};
use geoflow_core::diagnostics;
use geoflow_core::grid::{self, Grid as CoreGrid};
use geoflow_core::plasticity::PlasticPotential;
use geoflow_core::potentials::{self, PhaseModel};
use geoflow_core::stepper::Trajectory as CoreTrajectory;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(format!("{e:#}"))
}

fn parse_command(name: &str) -> PyResult<Command> {
    Command::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| value_err(format!("unknown command `{name}`; expected one of {}", Command::ALL.map(|c| c.name()).join(", "))))
}

#[pyclass(frozen, from_py_object)]
#[derive(Clone, Copy)]
struct Grid {
    inner: CoreGrid,
}

#[pymethods]
impl Grid {
    #[new]
    #[pyo3(signature = (nx, ny, lx = 1.0, ly = 1.0))]
    fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> PyResult<Self> {
        Ok(Self { inner: CoreGrid::new(nx, ny, lx, ly).map_err(value_err)? })
    }

    #[getter]
    fn nx(&self) -> usize {
        self.inner.nx
    }

    #[getter]
    fn ny(&self) -> usize {
        self.inner.ny
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.inner.dx()
    }

    #[getter]
    fn dy(&self) -> f64 {
        self.inner.dy()
    }

    /// Cell centres in row-major order, `x` fastest.
    fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.inner.len())
            .map(|k| {
                let (i, j) = self.inner.coords(k);
                self.inner.center(i, j)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let g = &self.inner;
        format!("Grid(nx={}, ny={}, lx={}, ly={})", g.nx, g.ny, g.lx, g.ly)
    }
}

/// Run configuration; omitted keys take their defaults.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_toml(toml).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(value_err)? })
    }

    /// The commented default configuration.
    #[staticmethod]
    fn reference() -> String {
        geoflow_cli::config::reference()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(value_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn grid(&self) -> PyResult<Grid> {
        Ok(Grid { inner: self.inner.grid.build().map_err(value_err)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.time.steps
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.time.t_end
    }

    /// Copy with a logarithmic potential of the given regularisation, or
    /// the obstacle potential for `None`.
    #[pyo3(signature = (alpha = None))]
    fn with_alpha(&self, alpha: Option<f64>) -> Self {
        let phase = alpha.map_or(PhaseModel::Obstacle, |alpha| PhaseModel::Logarithmic { alpha });
        Self { inner: self.inner.with_phase(phase) }
    }

    fn with_stress_diffusion(&self, gamma: f64) -> Self {
        Self { inner: self.inner.with_stress_diffusion(gamma) }
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, steps={})", self.inner.seed, self.inner.time.steps)
    }
}

#[pyclass(frozen)]
struct Report {
    inner: CliReport,
}

#[pymethods]
impl Report {
    #[getter]
    fn command(&self) -> &'static str {
        self.inner.command.name()
    }

    #[getter]
    fn passed(&self) -> bool {
        self.inner.pass
    }

    #[getter]
    fn checks(&self) -> usize {
        self.inner.summary.checks
    }

    #[getter]
    fn failed(&self) -> usize {
        self.inner.summary.failed
    }

    #[getter]
    fn failing(&self) -> Vec<String> {
        self.inner.summary.failing.clone()
    }

    /// The full report as written to `report.json`.
    fn json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.summary;
        format!("Report({}, checks={}, failed={})", self.inner.command.name(), s.checks, s.failed)
    }
}

#[pyclass(frozen)]
struct Trajectory {
    inner: CoreTrajectory,
}

#[pymethods]
impl Trajectory {
    fn __len__(&self) -> usize {
        self.inner.states.len()
    }

    #[getter]
    fn grid(&self) -> Grid {
        Grid { inner: self.inner.grid }
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| s.t).collect()
    }

    /// Total energy of every stored state.
    fn energies(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| diagnostics::total_energy(s, &self.inner.params)).collect()
    }

    /// Per-step slack of the discrete energy-dissipation balance.
    fn slacks(&self) -> Vec<f64> {
        self.inner.reports.iter().map(|r| r.slack).collect()
    }

    /// Mean of the phase field at every stored time.
    fn masses(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| grid::mean(&s.phi)).collect()
    }

    fn phase(&self, step: usize) -> PyResult<Vec<f64>> {
        Ok(self.state(step)?.phi.values.clone())
    }

    fn velocity(&self, step: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let v = &self.state(step)?.v;
        Ok((v.x.clone(), v.y.clone()))
    }

    /// Stress as `(xx, xy)`; the `yy` entry is `-xx`.
    fn stress(&self, step: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let s = &self.state(step)?.s;
        Ok((s.xx.clone(), s.xy.clone()))
    }
}

impl Trajectory {
    fn state(&self, step: usize) -> PyResult<&geoflow_core::stepper::SimState> {
        self.inner.states.get(step).ok_or_else(|| value_err(format!("step {step} out of range 0..{}", self.inner.states.len())))
    }
}

/// Runs a named command and writes its outputs under `out`. The report
/// comes back whether or not its checks pass.
#[pyfunction]
#[pyo3(signature = (command, config, out, workers = 1))]
fn run(py: Python<'_>, command: &str, config: &Config, out: PathBuf, workers: usize) -> PyResult<Report> {
    let cmd = parse_command(command)?;
    let cfg = config.inner.clone();
    let report = py.detach(move || geoflow_cli::run_command(cmd, &cfg, &out, workers)).map_err(runtime_err)?;
    Ok(Report { inner: report })
}

/// Integrates the configured initial state over the configured time grid.
#[pyfunction]
fn simulate(py: Python<'_>, config: &Config) -> PyResult<Trajectory> {
    config.inner.validate().map_err(value_err)?;
    let cfg = config.inner.clone();
    let traj = py.detach(move || experiments::simulate(&cfg)).map_err(runtime_err)?;
    Ok(Trajectory { inner: traj })
}

/// Minimiser of `|S - r|^2 / 2 + tau P(S)` for one trace-free tensor in
/// `(xx, xy)` storage.
#[pyfunction]
fn plastic_prox(modulus: f64, yield_stress: f64, r: (f64, f64), tau: f64) -> PyResult<(f64, f64)> {
    if !(modulus > 0.0 && yield_stress > 0.0 && tau > 0.0) {
        return Err(value_err("modulus, yield_stress and tau must be positive"));
    }
    let s = PlasticPotential::prox_with(modulus, yield_stress, [r.0, r.1], tau);
    Ok((s[0], s[1]))
}

/// Regularised logarithmic potential; infinite outside `[-1-alpha, 1+alpha]`.
#[pyfunction]
fn log_potential(alpha: f64, s: f64) -> PyResult<f64> {
    if !(alpha > 0.0) {
        return Err(value_err("alpha must be positive"));
    }
    Ok(potentials::log_value(alpha, s))
}

#[pyfunction]
fn recovery_bound(alpha: f64) -> PyResult<f64> {
    if !(alpha > 0.0) {
        return Err(value_err("alpha must be positive"));
    }
    Ok(potentials::mosco_recovery_bound(alpha))
}

#[pymodule]
fn geoflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", geoflow_cli::VERSION)?;
    m.add("COMMANDS", Command::ALL.map(|c| c.name()).to_vec())?;
    m.add_class::<Grid>()?;
    m.add_class::<Config>()?;
    m.add_class::<Report>()?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(plastic_prox, m)?)?;
    m.add_function(wrap_pyfunction!(log_potential, m)?)?;
    m.add_function(wrap_pyfunction!(recovery_bound, m)?)?;
    Ok(())
}
