//! Implicit coupled time step: Cahn-Hilliard with convex-concave splitting,
//! plastic stress update with Zaremba-Jaumann rate, and momentum with
//! Leray projection, iterated block Gauss-Seidel until the coupling settles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{energy_parts, EnergyParts};
use crate::grid::{self, Axis, Boundary, Grid, GridError, ScalarField, Stencil, TensorField, VectorField, AXES};
use crate::linalg::{self, Factor, LinalgError, SparseMatrix, Triplets};
use crate::materials::{MaterialError, Materials};
use crate::ops;
use crate::plasticity::PlasticPotential;
use crate::potentials::{self, double_well, PhaseModel, PotentialError};

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("splitting constant kappa = {0} is below the double-well convexity defect")]
    Kappa(f64),
    #[error("phase solver did not converge after {iterations} iterations (residual {residual:e})")]
    PhaseNonConvergence { iterations: usize, residual: f64 },
    #[error("coupled iteration did not converge after {iterations} sweeps (increment {increment:e})")]
    NonConvergence { iterations: usize, increment: f64 },
    #[error("stress solver did not converge (residual {0:e})")]
    StressNonConvergence(f64),
    #[error("phase value {value} left the admissible interval of reach {reach}")]
    LeftDomain { value: f64, reach: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub materials: Materials,
    pub phase: PhaseModel,
    /// Splitting constant; `W + kappa s^2 / 2` must be convex.
    pub kappa: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { materials: Materials::default(), phase: PhaseModel::default(), kappa: double_well::CONVEXITY_DEFECT }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), StepError> {
        self.phase.validate()?;
        self.materials.validate(self.phase.reach())?;
        if !(self.kappa >= double_well::CONVEXITY_DEFECT && self.kappa.is_finite()) {
            return Err(StepError::Kappa(self.kappa));
        }
        Ok(())
    }

    pub fn plastic(&self) -> PlasticPotential {
        PlasticPotential { modulus: self.materials.plastic_modulus, yield_stress: self.materials.yield_stress }
    }

    /// `W_kappa = W_dw + W_sing + kappa s^2 / 2` (singular part finite only
    /// on the admissible interval).
    pub fn convexified(&self, s: f64) -> f64 {
        self.phase.value(s) + 0.5 * self.kappa * s * s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Relative max-norm increment that ends the coupling sweeps.
    pub outer_tol: f64,
    /// Relative residual for linear solves.
    pub linear_tol: f64,
    /// Max-norm residual for the phase Newton iteration.
    pub newton_tol: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    /// Under-relaxation of the velocity between sweeps.
    pub relaxation: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { outer_tol: 1e-9, linear_tol: 1e-11, newton_tol: 1e-11, max_outer: 200, max_newton: 60, relaxation: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { t_start: 0.0, t_end: 0.5, steps: 50 }
    }
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self, StepError> {
        Self { t_start: 0.0, t_end, steps }.validated()
    }

    pub fn validated(self) -> Result<Self, StepError> {
        if self.steps == 0 || !(self.t_end > self.t_start) || !self.t_end.is_finite() {
            return Err(StepError::Invalid(format!("bad time grid {self:?}")));
        }
        Ok(self)
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt()
    }

    /// Twice as many steps over the same interval.
    pub fn refined(&self) -> Self {
        Self { steps: 2 * self.steps, ..*self }
    }
}

/// `(1 - rho^2)^4` for `rho = |x - c| / r < 1`, zero outside.
pub fn radial_bump(x: f64, y: f64, center: [f64; 2], radius: f64) -> f64 {
    let rho2 = ((x - center[0]).powi(2) + (y - center[1]).powi(2)) / (radius * radius);
    if rho2 >= 1.0 {
        0.0
    } else {
        (1.0 - rho2).powi(4)
    }
}

fn vortex(grid: &Grid, amplitude: f64, center: [f64; 2], radius: f64) -> VectorField {
    let psi = ScalarField::from_fn(*grid, Boundary::Dirichlet, |x, y| amplitude * radius * radial_bump(x, y, center, radius));
    VectorField::curl_of(&psi)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Forcing {
    #[default]
    None,
    /// Discrete curl of a compactly supported stream function, modulated by
    /// `cos(2 pi frequency t)`.
    Vortex { amplitude: f64, center: [f64; 2], radius: f64, frequency: f64 },
}

impl Forcing {
    pub fn sample(&self, grid: &Grid, t: f64) -> VectorField {
        match *self {
            Forcing::None => VectorField::zeros(*grid, Boundary::Dirichlet),
            Forcing::Vortex { amplitude, center, radius, frequency } => {
                let a = amplitude * (2.0 * std::f64::consts::PI * frequency * t).cos();
                vortex(grid, a, center, radius)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseInit {
    Constant { value: f64 },
    /// `amplitude * tanh((radius - r) / (sqrt(2) width))`, clipped to `[-1, 1]`.
    Drop { center: [f64; 2], radius: f64, width: f64, amplitude: f64 },
    /// Uniform noise of the given amplitude around `mean`, clipped to `[-1, 1]`.
    Noise { mean: f64, amplitude: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityInit {
    #[default]
    Zero,
    Vortex { amplitude: f64, center: [f64; 2], radius: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StressInit {
    #[default]
    Zero,
    Uniform { xx: f64, xy: f64 },
    Bump { xx: f64, xy: f64, center: [f64; 2], radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialData {
    pub phase: PhaseInit,
    #[serde(default)]
    pub velocity: VelocityInit,
    #[serde(default)]
    pub stress: StressInit,
}

impl Default for InitialData {
    fn default() -> Self {
        Self {
            phase: PhaseInit::Drop { center: [0.5, 0.5], radius: 0.25, width: 0.05, amplitude: 0.95 },
            velocity: VelocityInit::Vortex { amplitude: 0.5, center: [0.5, 0.5], radius: 0.4 },
            stress: StressInit::Zero,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub t: f64,
    pub phi: ScalarField,
    pub mu: ScalarField,
    /// Selection of the singular subdifferential.
    pub beta: ScalarField,
    pub v: VectorField,
    pub s: TensorField,
    /// Plastic subgradient produced by the step that reached this state.
    pub xi: TensorField,
    /// Pressure normalised to zero mean.
    pub p: ScalarField,
}

impl SimState {
    pub fn grid(&self) -> &Grid {
        &self.phi.grid
    }

    /// Builds a state from raw fields, computing the chemical potential from
    /// the phase equilibrium relation.
    pub fn from_fields(t: f64, phi: ScalarField, v: VectorField, s: TensorField, params: &ModelParams) -> Result<Self, StepError> {
        let g = phi.grid;
        for &p in &phi.values {
            if !params.phase.admissible(p) {
                return Err(StepError::LeftDomain { value: p, reach: params.phase.reach() });
            }
        }
        if params.plastic().functional(&phi, &s).is_infinite() {
            return Err(StepError::Invalid("initial stress outside the yield ball".into()));
        }
        let beta = match params.phase {
            PhaseModel::Logarithmic { .. } => potentials::select_beta(&params.phase, &phi.values, None, 0.0)?,
            PhaseModel::Obstacle => vec![0.0; g.len()],
        };
        let lap = grid::face_operator(&g, &phi.values, None, None);
        let mu: Vec<f64> = (0..g.len()).map(|k| lap[k] + double_well::d1(phi.values[k]) + beta[k]).collect();
        Ok(Self {
            t,
            mu: ScalarField { grid: g, bc: Boundary::Neumann, values: mu },
            beta: ScalarField { grid: g, bc: Boundary::Neumann, values: beta },
            xi: TensorField::zeros(g, Boundary::Neumann),
            p: ScalarField::zeros(g, Boundary::Neumann),
            phi,
            v,
            s,
        })
    }
}

pub fn initial_state(grid: &Grid, params: &ModelParams, init: &InitialData, seed: u64) -> Result<SimState, StepError> {
    let g = *grid;
    let phi = match &init.phase {
        PhaseInit::Constant { value } => ScalarField::constant(g, Boundary::Neumann, *value),
        PhaseInit::Drop { center, radius, width, amplitude } => ScalarField::from_fn(g, Boundary::Neumann, |x, y| {
            let r = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
            (amplitude * ((radius - r) / (std::f64::consts::SQRT_2 * width)).tanh()).clamp(-1.0, 1.0)
        }),
        PhaseInit::Noise { mean, amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..g.len()).map(|_| (mean + amplitude * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0)).collect();
            ScalarField { grid: g, bc: Boundary::Neumann, values }
        }
    };
    let v = match init.velocity {
        VelocityInit::Zero => VectorField::zeros(g, Boundary::Dirichlet),
        VelocityInit::Vortex { amplitude, center, radius } => vortex(&g, amplitude, center, radius),
    };
    let s = match init.stress {
        StressInit::Zero => TensorField::zeros(g, Boundary::Neumann),
        StressInit::Uniform { xx, xy } => {
            TensorField { grid: g, bc: Boundary::Neumann, xx: vec![xx; g.len()], xy: vec![xy; g.len()] }
        }
        StressInit::Bump { xx, xy, center, radius } => {
            let b = ScalarField::from_fn(g, Boundary::Neumann, |x, y| radial_bump(x, y, center, radius));
            TensorField {
                grid: g,
                bc: Boundary::Neumann,
                xx: b.values.iter().map(|w| w * xx).collect(),
                xy: b.values.iter().map(|w| w * xy).collect(),
            }
        }
    };
    SimState::from_fields(0.0, phi, v, s, params)
}

/// Per-step solver and energy bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub t: f64,
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    pub factorisations: usize,
    pub last_increment: f64,
    pub residual_phase: f64,
    pub residual_chemical: f64,
    pub residual_momentum: f64,
    pub residual_divergence: f64,
    pub residual_subgradient: f64,
    pub complementarity: f64,
    pub energy_before: EnergyParts,
    pub energy_after: EnergyParts,
    pub diss_visc: f64,
    pub diss_gamma: f64,
    pub diss_mix: f64,
    pub diss_plastic: f64,
    pub f_work: f64,
    /// `E_k + f_work - E_{k+1} - dissipation`; non-negative for the scheme.
    pub slack: f64,
    /// Exact discrete dissipation the scheme adds on top of the physical one.
    pub numerical_dissipation: f64,
    /// `slack - numerical_dissipation`: zero up to solver error.
    pub defect: f64,
}

struct PhaseCtx<'a> {
    phi_k: &'a [f64],
    rhs1: Vec<f64>,
    mob: [Vec<f64>; 2],
    h: f64,
    kappa: f64,
    model: PhaseModel,
}

impl PhaseCtx<'_> {
    fn g(&self, s: f64) -> f64 {
        double_well::d1(s) + 0.5 * self.kappa * s + self.model.singular_d1(s)
    }

    fn dg(&self, s: f64) -> f64 {
        double_well::d2(s) + 0.5 * self.kappa + self.model.singular_d2(s)
    }
}

const ACTIVE_SHIFT: f64 = 1.0;

/// Adds `w * row^T row` to the matrix.
fn add_gram(t: &mut Triplets, row: &[(usize, f64)], w: f64, row_off: usize, col_off: usize) {
    for &(p, cp) in row {
        for &(q, cq) in row {
            t.add(row_off + p, col_off + q, w * cp * cq);
        }
    }
}

pub struct Stepper {
    grid: Grid,
    params: ModelParams,
    settings: SolverSettings,
    mom_symbolic: Option<faer::sparse::linalg::solvers::SymbolicLu<usize>>,
    ch_symbolic: Option<faer::sparse::linalg::solvers::SymbolicLu<usize>>,
    stress_symbolic: Option<faer::sparse::linalg::solvers::SymbolicLu<usize>>,
    mom_ldlt_symbolic: Option<std::sync::Arc<faer::sparse::linalg::cholesky::SymbolicCholesky<usize>>>,
    factorisations: usize,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn rel_increment(new: &[f64], old: &[f64]) -> f64 {
    max_abs_diff(new, old) / (1.0 + linalg::max_abs(new))
}

fn check_finite(x: &[f64], what: &'static str) -> Result<(), StepError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StepError::NonFinite(what))
    }
}

impl Stepper {
    pub fn new(grid: Grid, params: ModelParams, settings: SolverSettings) -> Result<Self, StepError> {
        params.validate()?;
        if !(settings.relaxation > 0.0 && settings.relaxation <= 1.0) {
            return Err(StepError::Invalid(format!("relaxation {} outside (0, 1]", settings.relaxation)));
        }
        Ok(Self { grid, params, settings, mom_symbolic: None, ch_symbolic: None, stress_symbolic: None, mom_ldlt_symbolic: None, factorisations: 0 })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    fn factor(&mut self, a: &SparseMatrix, which: u8) -> Result<Factor, StepError> {
        let slot = match which {
            0 => &mut self.ch_symbolic,
            1 => &mut self.mom_symbolic,
            _ => &mut self.stress_symbolic,
        };
        if slot.is_none() {
            *slot = Some(a.symbolic()?);
        }
        self.factorisations += 1;
        Ok(a.factor(slot.as_ref())?)
    }

    /// Solves with the cached factor if it still contracts, refactoring
    /// the current operator otherwise.
    fn solve_cached(&mut self, a: &SparseMatrix, cache: &mut Option<Factor>, b: &[f64], x: &mut [f64], which: u8, tol: f64) -> Result<(), StepError> {
        if let Some(f) = cache.as_ref() {
            if linalg::gmres(a, f, b, x, tol, 30, 60)?.converged {
                return Ok(());
            }
        }
        let f = self.factor(a, which)?;
        let sol = f.solve(b)?;
        x.copy_from_slice(&sol);
        let r = linalg::refine(a, &f, b, x, tol, 4)?;
        *cache = Some(f);
        if !r.converged && r.residual > 1e3 * tol {
            return Err(StepError::Linalg(LinalgError::Factorisation(format!("refined residual {:e}", r.residual))));
        }
        Ok(())
    }

    /// Symmetric part of the momentum saddle system with the convection
    /// dropped, factored as `LDL^T`.
    fn momentum_preconditioner(&mut self, diag: &[f64], nu: &[f64]) -> Result<Factor, StepError> {
        let g = self.grid;
        let n = g.len();
        let zero = vec![0.0; n];
        let m = saddle_matrix_sym(&g, diag, nu, &zero)?;
        if self.mom_ldlt_symbolic.is_none() {
            self.mom_ldlt_symbolic = Some(m.symbolic_ldlt()?);
        }
        let mut signs = vec![1i8; 3 * n - 1];
        signs[2 * n..].iter_mut().for_each(|s| *s = -1);
        let scale = linalg::max_abs(diag).max(1.0);
        self.factorisations += 1;
        Ok(m.factor_ldlt(self.mom_ldlt_symbolic.as_ref(), &signs, 1e-10 * scale)?.with_negated_tail(2 * n))
    }

    #[allow(clippy::too_many_arguments)]
    fn solve_momentum(&mut self, a: &SparseMatrix, cache: &mut Option<Factor>, rho_bar: &[f64], nu: &[f64], h: f64, b: &[f64], x: &mut [f64], tol: f64) -> Result<(), StepError> {
        let diag: Vec<f64> = rho_bar.iter().map(|r| r / h).collect();
        for attempt in 0..2 {
            if cache.is_none() || attempt == 1 {
                *cache = Some(self.momentum_preconditioner(&diag, nu)?);
            }
            let r = linalg::gmres(a, cache.as_ref().unwrap(), b, x, tol, 40, 400)?;
            if r.converged {
                // A stale preconditioner is rebuilt before the next solve.
                if r.iterations > 25 {
                    *cache = None;
                }
                return Ok(());
            }
        }
        Err(StepError::Linalg(LinalgError::Factorisation("momentum solve did not converge".into())))
    }

    fn phase_jacobian(&self, pc: &PhaseCtx, phi: &[f64], active: &[i8]) -> Result<SparseMatrix, StepError> {
        let g = &self.grid;
        let n = g.len();
        let mut t = Triplets::new(2 * n, 2 * n);
        for k in 0..n {
            t.add(k, k, 1.0);
        }
        // Mobility block in the upper right, gradient energy in the lower
        // left; active rows keep explicit zeros so the pattern is fixed.
        for (ai, axis) in AXES.into_iter().enumerate() {
            for k in 0..n {
                let row = grid::stencil_row(g, axis, Stencil::Forward, Boundary::Neumann, k);
                for &(p, cp) in &row {
                    for &(q, cq) in &row {
                        t.add(p, n + q, pc.h * pc.mob[ai][k] * cp * cq);
                        let lap_val = cp * cq;
                        let on = if active[p] == 0 { 1.0 } else { 0.0 };
                        t.add(n + p, q, on * lap_val);
                    }
                }
            }
        }
        for k in 0..n {
            if active[k] == 0 {
                t.add(n + k, k, pc.dg(phi[k]));
                t.add(n + k, n + k, -1.0);
            } else {
                t.add(n + k, k, 1.0);
                t.add(n + k, n + k, 0.0);
            }
        }
        Ok(t.build()?)
    }

    fn phase_residual(&self, pc: &PhaseCtx, phi: &[f64], mu: &[f64], active: &[i8]) -> Vec<f64> {
        let g = &self.grid;
        let n = g.len();
        let lm = ops::weighted_neg_laplacian(g, &pc.mob, mu);
        let lap = grid::face_operator(g, phi, None, None);
        let mut r = vec![0.0; 2 * n];
        for k in 0..n {
            r[k] = phi[k] + pc.h * lm[k] - pc.rhs1[k];
            r[n + k] = match active[k] {
                0 => -mu[k] + lap[k] + pc.g(phi[k]) - 0.5 * pc.kappa * pc.phi_k[k],
                a => phi[k] - a as f64,
            };
        }
        r
    }

    /// Size of the residual that f64 rounding alone produces; the Newton
    /// tolerance is raised to it on fine grids where `1/dx^2` is large.
    fn phase_rounding_floor(&self, pc: &PhaseCtx, phi: &[f64], mu: &[f64], beta: &[f64]) -> f64 {
        let g = &self.grid;
        let stencil = 4.0 * (1.0 / (g.dx() * g.dx()) + 1.0 / (g.dy() * g.dy()));
        let mob = pc.mob.iter().flat_map(|m| m.iter()).fold(0.0f64, |a, &b| a.max(b.abs()));
        let (p, m, b) = (linalg::max_abs(phi), linalg::max_abs(mu), linalg::max_abs(beta));
        let rhs = linalg::max_abs(&pc.rhs1);
        let first = p + pc.h * mob * stencil * m + rhs;
        let second = m + stencil * p + p * p * p + pc.kappa * p + b;
        4.0 * f64::EPSILON * first.max(second)
    }

    /// Multiplier implied by the chemical-potential relation, with the
    /// singular part removed.
    fn implied_beta(&self, pc: &PhaseCtx, phi: &[f64], mu: &[f64]) -> Vec<f64> {
        let lap = grid::face_operator(&self.grid, phi, None, None);
        (0..phi.len())
            .map(|k| mu[k] - (lap[k] + double_well::d1(phi[k]) + pc.kappa * phi[k] - 0.5 * pc.kappa * (phi[k] + pc.phi_k[k])))
            .collect()
    }

    /// Obstacle mode: primal-dual active set Newton on `(phi, mu)`.
    fn solve_phase(&mut self, pc: &PhaseCtx, phi: &mut Vec<f64>, mu: &mut Vec<f64>, active: &mut Vec<i8>, beta: &mut Vec<f64>, cache: &mut Option<Factor>) -> Result<usize, StepError> {
        if let PhaseModel::Logarithmic { alpha } = pc.model {
            return self.solve_phase_log(pc, alpha, phi, mu, beta, cache);
        }
        let n = self.grid.len();
        let tol = self.settings.newton_tol;
        let mut last_res = f64::INFINITY;
        for it in 0..self.settings.max_newton {
            let mut changed = false;
            {
                let beta = self.implied_beta(pc, phi, mu);
                for k in 0..n {
                    let b = if active[k] == 0 { 0.0 } else { beta[k] };
                    let a = if b + ACTIVE_SHIFT * (phi[k] - 1.0) > 0.0 {
                        1
                    } else if b + ACTIVE_SHIFT * (phi[k] + 1.0) < 0.0 {
                        -1
                    } else {
                        0
                    };
                    if a != active[k] {
                        changed = true;
                        active[k] = a;
                    }
                }
            }
            let r = self.phase_residual(pc, phi, mu, active);
            let res = linalg::max_abs(&r);
            check_finite(&r, "phase residual")?;
            last_res = res;
            let floor = self.phase_rounding_floor(pc, phi, mu, &[]);
            if res <= tol.max(floor) && !changed {
                let b = self.implied_beta(pc, phi, mu);
                *beta = (0..n).map(|k| if active[k] == 0 { 0.0 } else { b[k] }).collect();
                return Ok(it);
            }
            if changed {
                *cache = None;
            }
            let jac = self.phase_jacobian(pc, phi, active)?;
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let mut d = vec![0.0; 2 * n];
            self.solve_cached(&jac, cache, &rhs, &mut d, 0, self.settings.linear_tol)?;
            for k in 0..n {
                phi[k] = if active[k] == 0 { phi[k] + d[k] } else { active[k] as f64 };
                mu[k] += d[n + k];
            }
        }
        Err(StepError::PhaseNonConvergence { iterations: self.settings.max_newton, residual: last_res })
    }

    /// Logarithmic mode. Newton runs on `(beta, mu)` with
    /// `phi = (1+alpha) tanh(beta / 2 alpha)`, the inverse of `W_sing'`.
    /// For small alpha the solution sits closer to the barrier than f64 can
    /// resolve in `phi`, while `beta` stays moderate and smooth.
    fn solve_phase_log(&mut self, pc: &PhaseCtx, alpha: f64, phi: &mut Vec<f64>, mu: &mut Vec<f64>, beta: &mut Vec<f64>, cache: &mut Option<Factor>) -> Result<usize, StepError> {
        let g = self.grid;
        let g = &g;
        let n = g.len();
        let tol = self.settings.newton_tol;
        let reach = 1.0 + alpha;
        let lift = |b: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let phi: Vec<f64> = b.iter().map(|&x| potentials::log_d1_inverse(alpha, x)).collect();
            let dphi = b
                .iter()
                .map(|&x| {
                    let e = (-(x / alpha).abs()).exp();
                    reach / (2.0 * alpha) * 4.0 * e / ((1.0 + e) * (1.0 + e))
                })
                .collect();
            (phi, dphi)
        };
        let residual = |phi: &[f64], mu: &[f64], beta: &[f64]| -> Vec<f64> {
            let lm = ops::weighted_neg_laplacian(g, &pc.mob, mu);
            let lap = grid::face_operator(g, phi, None, None);
            let mut r = vec![0.0; 2 * n];
            for k in 0..n {
                r[k] = phi[k] + pc.h * lm[k] - pc.rhs1[k];
                r[n + k] = -mu[k] + lap[k] + double_well::d1(phi[k]) + 0.5 * pc.kappa * phi[k] + beta[k] - 0.5 * pc.kappa * pc.phi_k[k];
            }
            r
        };
        let mut last_res = f64::INFINITY;
        for it in 0..self.settings.max_newton {
            let (p, dphi) = lift(beta);
            let r = residual(&p, mu, beta);
            check_finite(&r, "phase residual")?;
            let res = linalg::max_abs(&r);
            last_res = res;
            if res <= tol.max(self.phase_rounding_floor(pc, &p, mu, beta)) {
                *phi = p;
                return Ok(it);
            }
            let mut t = Triplets::new(2 * n, 2 * n);
            for k in 0..n {
                t.add(k, k, dphi[k]);
            }
            for (ai, axis) in AXES.into_iter().enumerate() {
                for k in 0..n {
                    let row = grid::stencil_row(g, axis, Stencil::Forward, Boundary::Neumann, k);
                    for &(a, ca) in &row {
                        for &(b, cb) in &row {
                            t.add(a, n + b, pc.h * pc.mob[ai][k] * ca * cb);
                            t.add(n + a, b, ca * cb * dphi[b]);
                        }
                    }
                }
            }
            for k in 0..n {
                t.add(n + k, k, (double_well::d2(p[k]) + 0.5 * pc.kappa) * dphi[k] + 1.0);
                t.add(n + k, n + k, -1.0);
            }
            let jac = t.build()?;
            let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
            let mut d = vec![0.0; 2 * n];
            self.solve_cached(&jac, cache, &rhs, &mut d, 0, self.settings.linear_tol)?;
            // Armijo backtracking on the Euclidean residual.
            let merit = linalg::norm2(&r);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let tb: Vec<f64> = (0..n).map(|k| beta[k] + step * d[k]).collect();
                let tm: Vec<f64> = (0..n).map(|k| mu[k] + step * d[n + k]).collect();
                let tr = linalg::norm2(&residual(&lift(&tb).0, &tm, &tb));
                if tr.is_finite() && tr <= (1.0 - 1e-4 * step) * merit {
                    *beta = tb;
                    *mu = tm;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                return Err(StepError::PhaseNonConvergence { iterations: it, residual: res });
            }
            if step < 1.0 {
                *cache = None;
            }
        }
        Err(StepError::PhaseNonConvergence { iterations: self.settings.max_newton, residual: last_res })
    }

    fn stress_matrix(&self, a_cells: &[f64], h: f64, gamma: f64) -> Result<SparseMatrix, StepError> {
        let g = &self.grid;
        let n = g.len();
        let mut t = Triplets::new(n, n);
        for k in 0..n {
            t.add(k, k, 1.0 + h * a_cells[k]);
        }
        for axis in AXES {
            for k in 0..n {
                let row = grid::stencil_row(g, axis, Stencil::Forward, Boundary::Neumann, k);
                add_gram(&mut t, &row, h * gamma, 0, 0);
            }
        }
        Ok(t.build()?)
    }

    /// Minimises `sum (1 + h a)|S|^2/2 + h gamma |grad S|^2/2 - <r, S>` over
    /// the yield ball by accelerated projected gradient.
    fn constrained_stress(&self, a_cells: &[f64], h: f64, gamma: f64, sigma: f64, r: &TensorField, start: TensorField) -> Result<TensorField, StepError> {
        let g = &self.grid;
        let n = g.len();
        let lip = a_cells.iter().fold(0.0f64, |m, a| m.max(1.0 + h * a)) + h * gamma * (4.0 / (g.dx() * g.dx()) + 4.0 / (g.dy() * g.dy()));
        let proj = |s: &mut TensorField| {
            for k in 0..n {
                let z = PlasticPotential::prox_with(0.0, sigma, [s.xx[k], s.xy[k]], 0.0);
                s.xx[k] = z[0];
                s.xy[k] = z[1];
            }
        };
        let grad = |s: &TensorField| -> TensorField {
            let lxx = grid::face_operator(g, &s.xx, None, None);
            let lxy = grid::face_operator(g, &s.xy, None, None);
            TensorField {
                xx: (0..n).map(|k| (1.0 + h * a_cells[k]) * s.xx[k] + h * gamma * lxx[k] - r.xx[k]).collect(),
                xy: (0..n).map(|k| (1.0 + h * a_cells[k]) * s.xy[k] + h * gamma * lxy[k] - r.xy[k]).collect(),
                ..s.clone()
            }
        };
        let tol = self.settings.linear_tol * (1.0 + r.max_norm());
        let mut x = start;
        proj(&mut x);
        let mut y = x.clone();
        let mut tk = 1.0f64;
        let mut res = f64::INFINITY;
        for _ in 0..200_000 {
            let gy = grad(&y);
            let mut xn = y.clone();
            for k in 0..n {
                xn.xx[k] -= gy.xx[k] / lip;
                xn.xy[k] -= gy.xy[k] / lip;
            }
            proj(&mut xn);
            // Gradient-mapping residual at the new iterate.
            let gx = grad(&xn);
            let mut pm = xn.clone();
            for k in 0..n {
                pm.xx[k] -= gx.xx[k] / lip;
                pm.xy[k] -= gx.xy[k] / lip;
            }
            proj(&mut pm);
            res = lip * max_abs_diff(&pm.xx, &xn.xx).max(max_abs_diff(&pm.xy, &xn.xy));
            if res <= tol {
                return Ok(xn);
            }
            let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            let beta = (tk - 1.0) / tn;
            // Restart when the momentum points uphill.
            let uphill: f64 = (0..n).map(|k| gy.xx[k] * (xn.xx[k] - x.xx[k]) + gy.xy[k] * (xn.xy[k] - x.xy[k])).sum();
            if uphill > 0.0 {
                tk = 1.0;
                y = xn.clone();
            } else {
                y = TensorField {
                    xx: (0..n).map(|k| xn.xx[k] + beta * (xn.xx[k] - x.xx[k])).collect(),
                    xy: (0..n).map(|k| xn.xy[k] + beta * (xn.xy[k] - x.xy[k])).collect(),
                    ..xn.clone()
                };
                tk = tn;
            }
            x = xn;
        }
        Err(StepError::StressNonConvergence(res))
    }

    #[allow(clippy::too_many_arguments)]
    fn solve_stress(&mut self, s_k: &TensorField, eta: &[f64], a_cells: &[f64], h: f64, v: &VectorField, s_lag: &TensorField, cache: &mut Option<Factor>) -> Result<TensorField, StepError> {
        let g = self.grid;
        let n = g.len();
        let gamma = self.params.materials.stress_diffusion;
        let sigma = self.params.materials.yield_stress;
        let strain = ops::strain_dev(v);
        let tr = ops::tensor_transport(v, s_lag);
        let jm = ops::jaumann(s_lag, &ops::spin(v));
        let r = TensorField {
            xx: (0..n).map(|k| s_k.xx[k] + h * (eta[k] * strain.xx[k] - tr.xx[k] - jm.xx[k])).collect(),
            xy: (0..n).map(|k| s_k.xy[k] + h * (eta[k] * strain.xy[k] - tr.xy[k] - jm.xy[k])).collect(),
            ..s_k.clone()
        };
        if gamma == 0.0 {
            let mut out = r.clone();
            for k in 0..n {
                let z = PlasticPotential::prox_with(a_cells[k], sigma, [r.xx[k], r.xy[k]], h);
                out.xx[k] = z[0];
                out.xy[k] = z[1];
            }
            return Ok(out);
        }
        if cache.is_none() {
            let m = self.stress_matrix(a_cells, h, gamma)?;
            *cache = Some(self.factor(&m, 2)?);
        }
        let f = cache.as_ref().unwrap();
        let out = TensorField { xx: f.solve(&r.xx)?, xy: f.solve(&r.xy)?, ..r.clone() };
        if out.max_norm() <= sigma {
            return Ok(out);
        }
        self.constrained_stress(a_cells, h, gamma, sigma, &r, out)
    }

    /// One time step of length `h` with forcing `f_next` sampled at the new
    /// time.
    pub fn step(&mut self, state: &SimState, f_next: &VectorField, h: f64) -> Result<(SimState, StepReport), StepError> {
        let g = self.grid;
        if *state.grid() != g || f_next.grid != g {
            return Err(StepError::Invalid("state and forcing must live on the stepper grid".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(StepError::Invalid(format!("time step {h}")));
        }
        let n = g.len();
        let mat = self.params.materials.clone();
        let model = self.params.phase;
        let kappa = self.params.kappa;
        let fac0 = self.factorisations;

        let phi_k = &state.phi;
        let nu = mat.viscosity.values(&phi_k.values);
        let eta = mat.elastic_modulus.values(&phi_k.values);
        let a_cells = mat.plastic_modulus.values(&phi_k.values);
        let mob = ops::face_weights(&g, &mat.mobility.values(&phi_k.values));
        let rho_k = mat.densities(&phi_k.values);
        let flux_w: Vec<f64> = phi_k.values.iter().map(|&p| mat.flux_weight(p)).collect();
        let grad_phi_k = grid::gradient(phi_k);

        let mut phi = phi_k.values.clone();
        let mut mu = state.mu.values.clone();
        let mut active: Vec<i8> = match model {
            PhaseModel::Obstacle => phi.iter().zip(&state.beta.values).map(|(&p, &b)| {
                if p >= 1.0 && b >= 0.0 {
                    1
                } else if p <= -1.0 && b <= 0.0 {
                    -1
                } else {
                    0
                }
            })
            .collect(),
            _ => vec![0; n],
        };
        let mut beta = state.beta.values.clone();
        let mut v = state.v.clone();
        let mut s = state.s.clone();
        let mut p: Vec<f64> = state.p.values[1..].iter().map(|q| q - state.p.values[0]).collect();

        // Fresh factors every step keep the result a function of the input
        // state alone, so restarted runs reproduce straight ones.
        let (mut ch_cache, mut mom_cache, mut st_cache) = (None, None, None);
        let mut newton_total = 0;
        let mut increment = f64::INFINITY;
        let mut sweeps = 0;
        let omega = self.settings.relaxation;

        while sweeps < self.settings.max_outer {
            sweeps += 1;
            let adv = ops::scalar_advection(&v, phi_k);
            let pc = PhaseCtx {
                phi_k: &phi_k.values,
                rhs1: (0..n).map(|k| phi_k.values[k] - h * adv[k]).collect(),
                mob: mob.clone(),
                h,
                kappa,
                model,
            };
            let (phi_old, mu_old, v_old, s_old) = (phi.clone(), mu.clone(), v.clone(), s.clone());
            let nit = self.solve_phase(&pc, &mut phi, &mut mu, &mut active, &mut beta, &mut ch_cache)?;
            newton_total += nit;

            s = self.solve_stress(&state.s, &eta, &a_cells, h, &v, &s_old, &mut st_cache)?;

            let rho_next = mat.densities(&phi);
            let rho_bar: Vec<f64> = (0..n).map(|k| 0.5 * (rho_next[k] + rho_k[k])).collect();
            let gmu = grid::gradient(&ScalarField { grid: g, bc: Boundary::Neumann, values: mu.clone() });
            let mx: Vec<f64> = (0..n).map(|k| rho_k[k] * v.x[k] - flux_w[k] * gmu.x[k]).collect();
            let my: Vec<f64> = (0..n).map(|k| rho_k[k] * v.y[k] - flux_w[k] * gmu.y[k]).collect();
            let a = saddle_matrix(&g, &rho_bar.iter().map(|r| r / h).collect::<Vec<_>>(), &nu, &mx, &my)?;
            let force = ops::stress_force(&eta, &s);
            let mut b = vec![0.0; 3 * n - 1];
            for k in 0..n {
                b[k] = rho_k[k] * state.v.x[k] / h + f_next.x[k] + mu[k] * grad_phi_k.x[k] - force.x[k];
                b[n + k] = rho_k[k] * state.v.y[k] / h + f_next.y[k] + mu[k] * grad_phi_k.y[k] - force.y[k];
            }
            let mut x = vec![0.0; 3 * n - 1];
            x[..n].copy_from_slice(&v.x);
            x[n..2 * n].copy_from_slice(&v.y);
            x[2 * n..].copy_from_slice(&p);
            // Inexact solves while the coupling is still far from settled.
            let lin_tol = self.settings.linear_tol.max(1e-3 * increment.min(1.0));
            self.solve_momentum(&a, &mut mom_cache, &rho_bar, &nu, h, &b, &mut x, lin_tol)?;
            check_finite(&x, "velocity")?;
            for k in 0..n {
                v.x[k] = (1.0 - omega) * v_old.x[k] + omega * x[k];
                v.y[k] = (1.0 - omega) * v_old.y[k] + omega * x[n + k];
            }
            p.copy_from_slice(&x[2 * n..]);

            increment = rel_increment(&phi, &phi_old)
                .max(rel_increment(&mu, &mu_old))
                .max(rel_increment(&v.x, &v_old.x))
                .max(rel_increment(&v.y, &v_old.y))
                .max(rel_increment(&s.xx, &s_old.xx))
                .max(rel_increment(&s.xy, &s_old.xy));
            if increment <= self.settings.outer_tol {
                break;
            }
        }
        if increment > self.settings.outer_tol {
            return Err(StepError::NonConvergence { iterations: sweeps, increment });
        }
        // Closed check: in logarithmic mode phi may round onto the barrier
        // while beta stays finite.
        for &q in &phi {
            if !(q.abs() <= model.reach()) {
                return Err(StepError::LeftDomain { value: q, reach: model.reach() });
            }
        }

        let gamma = mat.stress_diffusion;
        let phi_f = ScalarField { grid: g, bc: Boundary::Neumann, values: phi };
        let mu_f = ScalarField { grid: g, bc: Boundary::Neumann, values: mu };
        let beta_f = ScalarField { grid: g, bc: Boundary::Neumann, values: beta };

        // Plastic subgradient defined by the stress update itself.
        let strain = ops::strain_dev(&v);
        let tr = ops::tensor_transport(&v, &s);
        let jm = ops::jaumann(&s, &ops::spin(&v));
        let lxx = grid::face_operator(&g, &s.xx, None, None);
        let lxy = grid::face_operator(&g, &s.xy, None, None);
        let xi = TensorField {
            xx: (0..n).map(|k| eta[k] * strain.xx[k] - (s.xx[k] - state.s.xx[k]) / h - tr.xx[k] - jm.xx[k] - gamma * lxx[k]).collect(),
            xy: (0..n).map(|k| eta[k] * strain.xy[k] - (s.xy[k] - state.s.xy[k]) / h - tr.xy[k] - jm.xy[k] - gamma * lxy[k]).collect(),
            ..s.clone()
        };
        let residual_subgradient = self.params.plastic().subdifferential_residual(phi_k, &s, &xi);

        // Residuals of the phase equations at the final velocity.
        let adv = ops::scalar_advection(&v, phi_k);
        let lm = ops::weighted_neg_laplacian(&g, &mob, &mu_f.values);
        let residual_phase = (0..n).fold(0.0f64, |m, k| m.max((phi_f.values[k] - phi_k.values[k] + h * adv[k] + h * lm[k]).abs()));
        let lap = grid::face_operator(&g, &phi_f.values, None, None);
        let residual_chemical = (0..n).fold(0.0f64, |m, k| {
            let rhs = lap[k] + double_well::d1(phi_f.values[k]) + beta_f.values[k] + 0.5 * kappa * (phi_f.values[k] - phi_k.values[k]);
            m.max((mu_f.values[k] - rhs).abs())
        });
        let complementarity = match model {
            PhaseModel::Obstacle => potentials::complementarity_residual(&phi_f.values, &beta_f.values),
            _ => 0.0,
        };

        // Momentum residual with every coefficient at its final value.
        let rho_next = mat.densities(&phi_f.values);
        let rho_bar: Vec<f64> = (0..n).map(|k| 0.5 * (rho_next[k] + rho_k[k])).collect();
        let gmu = grid::gradient(&mu_f);
        let mx: Vec<f64> = (0..n).map(|k| rho_k[k] * v.x[k] - flux_w[k] * gmu.x[k]).collect();
        let my: Vec<f64> = (0..n).map(|k| rho_k[k] * v.y[k] - flux_w[k] * gmu.y[k]).collect();
        let a = saddle_matrix(&g, &rho_bar.iter().map(|r| r / h).collect::<Vec<_>>(), &nu, &mx, &my)?;
        let force = ops::stress_force(&eta, &s);
        let mut x = vec![0.0; 3 * n - 1];
        x[..n].copy_from_slice(&v.x);
        x[n..2 * n].copy_from_slice(&v.y);
        x[2 * n..].copy_from_slice(&p);
        let ax = a.matvec(&x);
        let mut residual_momentum = 0.0f64;
        for k in 0..n {
            let bx = rho_k[k] * state.v.x[k] / h + f_next.x[k] + mu_f.values[k] * grad_phi_k.x[k] - force.x[k];
            let by = rho_k[k] * state.v.y[k] / h + f_next.y[k] + mu_f.values[k] * grad_phi_k.y[k] - force.y[k];
            residual_momentum = residual_momentum.max((ax[k] - bx).abs()).max((ax[n + k] - by).abs());
        }
        let residual_divergence = grid::divergence(&v).max_abs();

        let mut pv = vec![0.0; n];
        pv[1..].copy_from_slice(&p);
        let pmean = pv.iter().sum::<f64>() / n as f64;
        pv.iter_mut().for_each(|q| *q -= pmean);
        let p_f = ScalarField { grid: g, bc: Boundary::Neumann, values: pv };
        let new_state = SimState { t: state.t + h, phi: phi_f, mu: mu_f, beta: beta_f, v, s, xi, p: p_f };

        // Energy balance.
        let before = energy_parts(state, &self.params);
        let after = energy_parts(&new_state, &self.params);
        let da = g.cell_area();
        let diss_visc = h * ops::viscous_form(&g, &nu, &new_state.v, &new_state.v);
        let diss_gamma = h * gamma * ops::tensor_face_form(&new_state.s, &new_state.s);
        let diss_mix = h * ops::weighted_face_form(&g, &mob, &new_state.mu.values, &new_state.mu.values);
        let diss_plastic = h * grid::inner_tensor(&new_state.xi, &new_state.s);
        let f_work = h * grid::inner_vector(f_next, &new_state.v);
        let slack = before.total + f_work - after.total - diss_visc - diss_gamma - diss_mix - diss_plastic;

        let mut num = 0.0;
        for k in 0..n {
            let dvx = new_state.v.x[k] - state.v.x[k];
            let dvy = new_state.v.y[k] - state.v.y[k];
            num += 0.5 * rho_k[k] * (dvx * dvx + dvy * dvy) * da;
            let (p1, p0) = (new_state.phi.values[k], phi_k.values[k]);
            let dw = double_well::d1(p1) + new_state.beta.values[k] + kappa * p1;
            let conv = dw * (p1 - p0) - (self.params.convexified(p1) - self.params.convexified(p0));
            num += conv * da;
        }
        let ds = TensorField {
            xx: (0..n).map(|k| new_state.s.xx[k] - state.s.xx[k]).collect(),
            xy: (0..n).map(|k| new_state.s.xy[k] - state.s.xy[k]).collect(),
            ..state.s.clone()
        };
        num += 0.5 * grid::inner_tensor(&ds, &ds);
        let dphi: Vec<f64> = (0..n).map(|k| new_state.phi.values[k] - phi_k.values[k]).collect();
        num += 0.5 * grid::face_gradient_sq(&g, &dphi);

        let report = StepReport {
            step: 0,
            t: new_state.t,
            outer_iterations: sweeps,
            newton_iterations: newton_total,
            factorisations: self.factorisations - fac0,
            last_increment: increment,
            residual_phase,
            residual_chemical,
            residual_momentum,
            residual_divergence,
            residual_subgradient,
            complementarity,
            energy_before: before,
            energy_after: after,
            diss_visc,
            diss_gamma,
            diss_mix,
            diss_plastic,
            f_work,
            slack,
            numerical_dissipation: num,
            defect: slack - num,
        };
        Ok((new_state, report))
    }
}

/// Saddle-point matrix of the momentum step on `(v.x, v.y, p[1..])`:
/// `diag v + skew convection with flux m + viscous form + grad p` over the
/// discrete divergence rows, with the first pressure unknown pinned.
pub(crate) fn saddle_matrix(g: &Grid, diag: &[f64], nu: &[f64], mx: &[f64], my: &[f64]) -> Result<SparseMatrix, StepError> {
    let n = g.len();
    let size = 3 * n - 1;
    let mut t = Triplets::new(size, size);
    let dir = Boundary::Dirichlet;
    for comp in 0..2 {
        let off = comp * n;
        for k in 0..n {
            t.add(off + k, off + k, diag[k]);
            for (axis, m) in [(Axis::X, mx), (Axis::Y, my)] {
                for (c, w) in grid::stencil_row(g, axis, Stencil::Central, dir, k) {
                    t.add(off + k, off + c, 0.5 * m[k] * w);
                    t.add(off + c, off + k, -0.5 * m[k] * w);
                }
            }
            for (c, w) in grid::stencil_row(g, AXES[comp], Stencil::Central, Boundary::Neumann, k) {
                if c != 0 {
                    t.add(off + k, 2 * n + c - 1, w);
                }
            }
        }
    }
    for s in ops::VISCOUS_STENCILS {
        for k in 0..n {
            let rows = ops::one_sided_strain_rows(g, s, k);
            for (r, wt) in rows.iter().zip(ops::STRAIN_WEIGHTS) {
                add_gram(&mut t, r, nu[k] * wt, 0, 0);
            }
        }
    }
    for j in 1..n {
        for (comp, axis) in AXES.into_iter().enumerate() {
            for (c, w) in grid::stencil_row(g, axis, Stencil::Central, dir, j) {
                t.add(2 * n + j - 1, comp * n + c, w);
            }
        }
    }
    Ok(t.build()?)
}

/// Symmetric saddle matrix `[K G; G^T -0]` with `K = diag + viscous form`
/// and the pressure gradient `G` of [`saddle_matrix`]; the pressure block
/// holds explicit `pdiag` entries.
pub(crate) fn saddle_matrix_sym(g: &Grid, diag: &[f64], nu: &[f64], pdiag: &[f64]) -> Result<SparseMatrix, StepError> {
    let n = g.len();
    let size = 3 * n - 1;
    let mut t = Triplets::new(size, size);
    for comp in 0..2 {
        let off = comp * n;
        for k in 0..n {
            t.add(off + k, off + k, diag[k]);
            for (c, w) in grid::stencil_row(g, AXES[comp], Stencil::Central, Boundary::Neumann, k) {
                if c != 0 {
                    t.add(off + k, 2 * n + c - 1, w);
                    t.add(2 * n + c - 1, off + k, w);
                }
            }
        }
    }
    for s in ops::VISCOUS_STENCILS {
        for k in 0..n {
            let rows = ops::one_sided_strain_rows(g, s, k);
            for (r, wt) in rows.iter().zip(ops::STRAIN_WEIGHTS) {
                add_gram(&mut t, r, nu[k] * wt, 0, 0);
            }
        }
    }
    for j in 1..n {
        t.add(2 * n + j - 1, 2 * n + j - 1, -pdiag[j]);
    }
    Ok(t.build()?)
}

/// A computed trajectory: `states[k]` at `time.time(k)`, `reports[k]` and
/// `forcing[k]` for the step from `k` to `k + 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: Grid,
    pub params: ModelParams,
    pub time: TimeGrid,
    pub states: Vec<SimState>,
    pub reports: Vec<StepReport>,
    pub forcing: Vec<VectorField>,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        self.time.dt()
    }
}

/// A step that failed inside [`run_partial`].
#[derive(Debug)]
pub struct StepFailure {
    pub step: usize,
    pub error: StepError,
}

/// Result of [`run_partial`]: the states computed before any failure.
/// `trajectory.time` keeps the requested grid, so an incomplete run has
/// fewer than `time.steps + 1` states.
#[derive(Debug)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub failure: Option<StepFailure>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

/// Runs the scheme, stopping at the first failed step. Errors only on
/// invalid setup; step failures are returned with the partial trajectory.
pub fn run_partial(initial: &SimState, params: &ModelParams, settings: &SolverSettings, time: &TimeGrid, forcing: &Forcing) -> Result<RunOutcome, StepError> {
    let time = time.validated()?;
    let grid = *initial.grid();
    let mut stepper = Stepper::new(grid, params.clone(), settings.clone())?;
    let h = time.dt();
    let mut states = Vec::with_capacity(time.steps + 1);
    let mut reports = Vec::with_capacity(time.steps);
    let mut fs = Vec::with_capacity(time.steps);
    let mut cur = initial.clone();
    cur.t = time.t_start;
    states.push(cur.clone());
    let mut failure = None;
    for k in 0..time.steps {
        let f = forcing.sample(&grid, time.time(k + 1));
        let (next, mut rep) = match stepper.step(&cur, &f, h) {
            Ok(r) => r,
            Err(error) => {
                failure = Some(StepFailure { step: k, error });
                break;
            }
        };
        rep.step = k;
        cur = next;
        cur.t = time.time(k + 1);
        states.push(cur.clone());
        reports.push(rep);
        fs.push(f);
    }
    let trajectory = Trajectory { grid, params: params.clone(), time, states, reports, forcing: fs };
    Ok(RunOutcome { trajectory, failure })
}

pub fn run(initial: &SimState, params: &ModelParams, settings: &SolverSettings, time: &TimeGrid, forcing: &Forcing) -> Result<Trajectory, StepError> {
    let out = run_partial(initial, params, settings, time, forcing)?;
    match out.failure {
        Some(f) => Err(f.error),
        None => Ok(out.trajectory),
    }
}
