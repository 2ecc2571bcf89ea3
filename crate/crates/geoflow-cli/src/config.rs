//! Run configuration: a TOML file with one table per concern. Every table
//! is optional and falls back to the desk-scale defaults; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use geoflow_core::grid::Grid;
use geoflow_core::potentials::PhaseModel;
use geoflow_core::stepper::{Forcing, InitialData, ModelParams, PhaseInit, SolverSettings, StressInit, TimeGrid, VelocityInit};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Command;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Field { field: String, reason: String },
}

fn bad(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { nx: 32, ny: 32, lx: 1.0, ly: 1.0 }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid, ConfigError> {
        Grid::new(self.nx, self.ny, self.lx, self.ly).map_err(|e| bad("grid", e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Used when `--out` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Dump the full state every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdeSpec {
    /// Solver tolerance of the loosened control run; omit to skip it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_tolerance: Option<f64>,
    /// Factor by which the control run's energy defect must exceed the
    /// default run's.
    pub control_factor: f64,
    /// Also run with the forcing switched off and require the energy itself
    /// to be non-increasing.
    pub unforced_run: bool,
}

impl Default for EdeSpec {
    fn default() -> Self {
        Self { control_tolerance: Some(1e-3), control_factor: 1e3, unforced_run: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvsSpec {
    pub tuples: usize,
    /// Absolute amplitude of every test bump.
    pub amplitude: f64,
    /// Number of uniformly spaced sample times, endpoints included.
    pub sample_points: usize,
    /// Absolute floor added to every discretisation tolerance.
    pub tolerance_floor: f64,
}

impl Default for EvsSpec {
    fn default() -> Self {
        Self { tuples: 10, amplitude: 0.2, sample_points: 10, tolerance_floor: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSweepSpec {
    /// Strictly decreasing regularisation parameters.
    pub alphas: Vec<f64>,
    pub include_obstacle: bool,
    /// Allowed ratio of every bound to its value in the first row.
    pub uniformity_factor: f64,
}

impl Default for AlphaSweepSpec {
    fn default() -> Self {
        Self { alphas: vec![1e-1, 1e-2, 1e-3, 1e-4], include_obstacle: true, uniformity_factor: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaSweepSpec {
    /// Positive stress diffusion values; zero is always added.
    pub gammas: Vec<f64>,
    /// Allowed ratio of `sup_t |S|` to the first row's.
    pub uniformity_factor: f64,
}

impl Default for GammaSweepSpec {
    fn default() -> Self {
        Self { gammas: vec![1e-1, 1e-2, 1e-3], uniformity_factor: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoscoSpec {
    pub alphas: Vec<f64>,
    pub theta: f64,
    /// Exponent expected to break the third-derivative bound.
    pub control_theta: f64,
}

impl Default for MoscoSpec {
    fn default() -> Self {
        Self { alphas: vec![1e-1, 1e-2, 1e-3, 1e-4], theta: 0.4, control_theta: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxSpec {
    pub cases: usize,
    /// Spacing of the search grid over the yield ball.
    pub resolution: f64,
    pub tolerance: f64,
    /// Random pairs for the nonexpansiveness check.
    pub pairs: usize,
}

impl Default for ProxSpec {
    fn default() -> Self {
        Self { cases: 100, resolution: 1e-3, tolerance: 2e-3, pairs: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiflowSpec {
    /// Largest allowed max-norm mismatch of the final states.
    pub tolerance: f64,
}

impl Default for SemiflowSpec {
    fn default() -> Self {
        Self { tolerance: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Optional; when present it must name the command being run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Command>,
    pub seed: u64,
    pub output: OutputSpec,
    pub grid: GridSpec,
    pub time: TimeGrid,
    pub params: ModelParams,
    pub solver: SolverSettings,
    pub initial: InitialData,
    pub forcing: Forcing,
    pub ede: EdeSpec,
    pub evs: EvsSpec,
    pub alpha_sweep: AlphaSweepSpec,
    pub gamma_sweep: GammaSweepSpec,
    pub mosco: MoscoSpec,
    pub prox: ProxSpec,
    pub semiflow: SemiflowSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 7,
            output: OutputSpec::default(),
            grid: GridSpec::default(),
            time: TimeGrid::default(),
            params: ModelParams::default(),
            solver: SolverSettings::default(),
            initial: InitialData::default(),
            forcing: Forcing::Vortex { amplitude: 1.0, center: [0.5, 0.5], radius: 0.3, frequency: 1.0 },
            ede: EdeSpec::default(),
            evs: EvsSpec::default(),
            alpha_sweep: AlphaSweepSpec::default(),
            gamma_sweep: GammaSweepSpec::default(),
            mosco: MoscoSpec::default(),
            prox: ProxSpec::default(),
            semiflow: SemiflowSpec::default(),
        }
    }
}

/// TOML integers are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be positive and finite, got {v}")))
    }
}

fn finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be finite, got {v}")))
    }
}

fn decreasing_positive(field: &str, v: &[f64]) -> Result<(), ConfigError> {
    if v.is_empty() {
        return Err(bad(field, "must not be empty"));
    }
    for (i, &a) in v.iter().enumerate() {
        positive(&format!("{field}[{i}]"), a)?;
    }
    if v.windows(2).any(|w| w[1] >= w[0]) {
        return Err(bad(field, "must be strictly decreasing"));
    }
    Ok(())
}

fn inside(field: &str, p: [f64; 2], g: &Grid) -> Result<(), ConfigError> {
    finite(field, p[0])?;
    finite(field, p[1])?;
    if !(0.0..=g.lx).contains(&p[0]) || !(0.0..=g.ly).contains(&p[1]) {
        return Err(bad(field, format!("{p:?} lies outside the domain")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    /// Checks every precondition the solver modules state, so that invalid
    /// input fails before any computation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > MAX_SEED {
            return Err(bad("seed", format!("must be at most {MAX_SEED}")));
        }
        let g = self.grid.build()?;
        if g.nx < 4 || g.ny < 4 {
            return Err(bad("grid", "at least 4 cells per direction"));
        }
        self.time.validated().map_err(|e| bad("time", e.to_string()))?;
        finite("time.t_start", self.time.t_start)?;
        self.params.validate().map_err(|e| bad("params", e.to_string()))?;

        let s = &self.solver;
        positive("solver.outer_tol", s.outer_tol)?;
        positive("solver.linear_tol", s.linear_tol)?;
        positive("solver.newton_tol", s.newton_tol)?;
        if s.max_outer == 0 {
            return Err(bad("solver.max_outer", "must be at least 1"));
        }
        if s.max_newton == 0 {
            return Err(bad("solver.max_newton", "must be at least 1"));
        }
        if !(s.relaxation > 0.0 && s.relaxation <= 1.0) {
            return Err(bad("solver.relaxation", "must lie in (0, 1]"));
        }

        match &self.initial.phase {
            PhaseInit::Constant { value } => {
                if !(value.abs() < 1.0) {
                    return Err(bad("initial.phase.value", "the mean phase must lie in (-1, 1)"));
                }
            }
            PhaseInit::Drop { center, radius, width, amplitude } => {
                inside("initial.phase.center", *center, &g)?;
                positive("initial.phase.radius", *radius)?;
                positive("initial.phase.width", *width)?;
                if !(*amplitude > 0.0 && *amplitude <= 1.0) {
                    return Err(bad("initial.phase.amplitude", "must lie in (0, 1]"));
                }
            }
            PhaseInit::Noise { mean, amplitude } => {
                if !(mean.abs() < 1.0) {
                    return Err(bad("initial.phase.mean", "the mean phase must lie in (-1, 1)"));
                }
                if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                    return Err(bad("initial.phase.amplitude", "must be non-negative"));
                }
            }
        }
        if let VelocityInit::Vortex { amplitude, center, radius } = self.initial.velocity {
            finite("initial.velocity.amplitude", amplitude)?;
            inside("initial.velocity.center", center, &g)?;
            positive("initial.velocity.radius", radius)?;
        }
        match self.initial.stress {
            StressInit::Zero => {}
            StressInit::Uniform { xx, xy } | StressInit::Bump { xx, xy, .. } => {
                finite("initial.stress.xx", xx)?;
                finite("initial.stress.xy", xy)?;
                let n = (2.0 * (xx * xx + xy * xy)).sqrt();
                if n > self.params.materials.yield_stress {
                    return Err(bad("initial.stress", format!("Frobenius size {n} exceeds the yield stress")));
                }
                if let StressInit::Bump { center, radius, .. } = self.initial.stress {
                    inside("initial.stress.center", center, &g)?;
                    positive("initial.stress.radius", radius)?;
                }
            }
        }
        if let Forcing::Vortex { amplitude, center, radius, frequency } = self.forcing {
            finite("forcing.amplitude", amplitude)?;
            inside("forcing.center", center, &g)?;
            positive("forcing.radius", radius)?;
            finite("forcing.frequency", frequency)?;
        }

        if let Some(t) = self.ede.control_tolerance {
            positive("ede.control_tolerance", t)?;
        }
        positive("ede.control_factor", self.ede.control_factor)?;
        if self.evs.tuples == 0 {
            return Err(bad("evs.tuples", "must be at least 1"));
        }
        positive("evs.amplitude", self.evs.amplitude)?;
        if self.evs.sample_points < 2 {
            return Err(bad("evs.sample_points", "must be at least 2"));
        }
        if !(self.evs.tolerance_floor >= 0.0 && self.evs.tolerance_floor.is_finite()) {
            return Err(bad("evs.tolerance_floor", "must be non-negative"));
        }
        decreasing_positive("alpha_sweep.alphas", &self.alpha_sweep.alphas)?;
        if !(self.alpha_sweep.uniformity_factor >= 1.0) {
            return Err(bad("alpha_sweep.uniformity_factor", "must be at least 1"));
        }
        decreasing_positive("gamma_sweep.gammas", &self.gamma_sweep.gammas)?;
        if !(self.gamma_sweep.uniformity_factor >= 1.0) {
            return Err(bad("gamma_sweep.uniformity_factor", "must be at least 1"));
        }
        decreasing_positive("mosco.alphas", &self.mosco.alphas)?;
        positive("mosco.theta", self.mosco.theta)?;
        positive("mosco.control_theta", self.mosco.control_theta)?;
        if self.prox.cases == 0 || self.prox.pairs == 0 {
            return Err(bad("prox", "cases and pairs must be at least 1"));
        }
        positive("prox.resolution", self.prox.resolution)?;
        positive("prox.tolerance", self.prox.tolerance)?;
        positive("semiflow.tolerance", self.semiflow.tolerance)?;
        Ok(())
    }

    /// Same configuration with a different phase model.
    pub fn with_phase(&self, phase: PhaseModel) -> Self {
        let mut c = self.clone();
        c.params.phase = phase;
        c
    }

    pub fn with_stress_diffusion(&self, gamma: f64) -> Self {
        let mut c = self.clone();
        c.params.materials.stress_diffusion = gamma;
        c
    }
}

/// Commented reference of every key with its default value.
pub fn reference() -> String {
    let mut out = String::from(
        "# geoflow configuration reference.\n\
         # Every table and key is optional; the values below are the defaults.\n\
         # Tables selected by `kind` are the exception: a chosen kind lists all its keys.\n\
         # Unknown keys are rejected. Generated by `geoflow reference`.\n\n",
    );
    out.push_str(&RunConfig::default().to_toml());
    out
}
