//! Energies and evaluators for the inequalities that characterise
//! solutions: the discrete energy balance, the energy-variational
//! inequality, weak-form residuals, relative energies and the dissipative
//! (relative energy-dissipation) inequality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{self, Axis, Boundary, GradientField, Grid, ScalarField, Stencil, TensorField, VectorField, AXES};
use crate::linalg::{self, Factor, Triplets};
use crate::ops;
use crate::plasticity::PlasticPotential;
use crate::potentials::{self, double_well, PhaseModel};
use crate::stepper::{self, ModelParams, SimState, StepError, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyParts {
    pub kinetic: f64,
    pub elastic: f64,
    pub gradient: f64,
    pub double_well: f64,
    pub singular: f64,
    pub total: f64,
}

pub fn energy_parts(state: &SimState, params: &ModelParams) -> EnergyParts {
    let g = *state.grid();
    let da = g.cell_area();
    let mat = &params.materials;
    let (mut kinetic, mut dw, mut sing) = (0.0, 0.0, 0.0);
    for k in 0..g.len() {
        let p = state.phi.values[k];
        kinetic += 0.5 * mat.density(p) * (state.v.x[k].powi(2) + state.v.y[k].powi(2));
        dw += double_well::value(p);
        sing += params.phase.singular_value(p);
    }
    let elastic = 0.5 * grid::inner_tensor(&state.s, &state.s);
    let gradient = 0.5 * grid::face_gradient_sq(&g, &state.phi.values);
    let (kinetic, double_well, singular) = (kinetic * da, dw * da, sing * da);
    EnergyParts { kinetic, elastic, gradient, double_well, singular, total: kinetic + elastic + gradient + double_well + singular }
}

pub fn total_energy(state: &SimState, params: &ModelParams) -> f64 {
    energy_parts(state, params).total
}

// ---------------------------------------------------------------------------
// Korn constant and dual norm of the forcing

/// `|v|^2 + (|G+ v|^2 + |G- v|^2) / 2` with one-sided Dirichlet differences,
/// as a sparse matrix on `(v.x, v.y)` without the cell area.
fn h1_matrix(g: &Grid) -> Result<crate::linalg::SparseMatrix, StepError> {
    let n = g.len();
    let mut t = Triplets::new(2 * n, 2 * n);
    for comp in 0..2 {
        let off = comp * n;
        for k in 0..n {
            t.add(off + k, off + k, 1.0);
            for s in ops::VISCOUS_STENCILS {
                for axis in AXES {
                    let row = grid::stencil_row(g, axis, s, Boundary::Dirichlet, k);
                    for &(p, cp) in &row {
                        for &(q, cq) in &row {
                            t.add(off + p, off + q, 0.5 * cp * cq);
                        }
                    }
                }
            }
        }
    }
    Ok(t.build()?)
}

pub fn h1_norm_sq(v: &VectorField) -> f64 {
    let g = &v.grid;
    let mut acc = grid::inner_vector(v, v);
    for s in ops::VISCOUS_STENCILS {
        for axis in AXES {
            let dx = grid::diff(g, axis, s, Boundary::Dirichlet, &v.x);
            let dy = grid::diff(g, axis, s, Boundary::Dirichlet, &v.y);
            acc += 0.5 * (grid::dot(g, &dx, &dx) + grid::dot(g, &dy, &dy));
        }
    }
    acc
}

/// Squared symmetric-gradient norm matching the viscous form: the viscous
/// dissipation with unit viscosity is twice this value.
pub fn sym_norm_sq(v: &VectorField) -> f64 {
    let ones = vec![1.0; v.grid.len()];
    0.5 * ops::viscous_form(&v.grid, &ones, v, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KornEstimate {
    /// Inflated constant used downstream.
    pub constant: f64,
    /// Converged Rayleigh quotient before inflation.
    pub raw: f64,
    pub iterations: usize,
    pub relative_change: f64,
}

pub const KORN_INFLATION: f64 = 1.1;

/// Largest ratio `|v|_H1^2 / |sym grad v|^2` over discretely solenoidal
/// Dirichlet fields, by power iteration on the Stokes resolvent.
pub fn estimate_korn(g: &Grid, seed: u64) -> Result<KornEstimate, StepError> {
    let n = g.len();
    let half = vec![0.5; n];
    let zero = vec![0.0; n];
    let stokes = stepper::saddle_matrix(g, &zero, &half, &zero, &zero)?;
    let mut signs = vec![1i8; 3 * n - 1];
    signs[2 * n..].iter_mut().for_each(|s| *s = -1);
    let factor = stepper::saddle_matrix_sym(g, &zero, &half, &zero)?.factor_ldlt(None, &signs, 1e-12)?.with_negated_tail(2 * n);
    let b = h1_matrix(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = ScalarField {
        grid: *g,
        bc: Boundary::Dirichlet,
        values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let mut v = VectorField::curl_of(&psi);
    let mut lam = 0.0f64;
    let mut change = f64::INFINITY;
    let mut it = 0;
    while it < 2000 {
        it += 1;
        let mut xv = v.x.clone();
        xv.extend_from_slice(&v.y);
        let bv = b.matvec(&xv);
        let mut rhs = bv.clone();
        rhs.resize(3 * n - 1, 0.0);
        let mut sol = factor.solve(&rhs)?;
        linalg::gmres(&stokes, &factor, &rhs, &mut sol, 1e-12, 30, 300)?;
        let next = VectorField { grid: *g, bc: Boundary::Dirichlet, x: sol[..n].to_vec(), y: sol[n..2 * n].to_vec() };
        let q = h1_norm_sq(&next) / sym_norm_sq(&next);
        let scale = linalg::max_abs(&sol[..2 * n]);
        v = VectorField { x: next.x.iter().map(|a| a / scale).collect(), y: next.y.iter().map(|a| a / scale).collect(), ..next };
        change = (q - lam).abs() / q;
        lam = q;
        if change < 1e-9 && it > 10 {
            break;
        }
    }
    Ok(KornEstimate { constant: KORN_INFLATION * lam, raw: lam, iterations: it, relative_change: change })
}

/// Squared dual norm of the forcing with respect to the discrete H1 norm
/// used by the Korn estimate.
pub struct DualNorm {
    grid: Grid,
    factor: Factor,
}

impl DualNorm {
    pub fn new(g: &Grid) -> Result<Self, StepError> {
        let b = h1_matrix(g)?;
        Ok(Self { grid: *g, factor: b.factor(None)? })
    }

    pub fn norm_sq(&self, f: &VectorField) -> Result<f64, StepError> {
        let mut x = f.x.clone();
        x.extend_from_slice(&f.y);
        let y = self.factor.solve(&x)?;
        Ok(self.grid.cell_area() * x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>())
    }
}

// ---------------------------------------------------------------------------
// Regularity weight

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularityWeight {
    /// Zero weight, valid with stress diffusion.
    Zero,
    /// `korn^2 / nu_floor * |S~|_inf^2`.
    Korn { korn: f64, nu_floor: f64 },
}

impl RegularityWeight {
    pub fn for_model(params: &ModelParams, korn: f64) -> Self {
        if params.materials.stress_diffusion > 0.0 {
            RegularityWeight::Zero
        } else {
            RegularityWeight::Korn { korn, nu_floor: params.materials.viscosity_floor() }
        }
    }

    /// Depends on the stress test field only.
    pub fn value(&self, s_test: &TensorField) -> f64 {
        match *self {
            RegularityWeight::Zero => 0.0,
            RegularityWeight::Korn { korn, nu_floor } => korn * korn / nu_floor * s_test.max_norm().powi(2),
        }
    }
}

// ---------------------------------------------------------------------------
// Auxiliary energy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub parts: EnergyParts,
    pub aux: f64,
    pub diss_visc: f64,
    pub diss_gamma: f64,
    pub diss_mix: f64,
    pub diss_plastic: f64,
    pub f_work: f64,
    /// Running sum of `h |f_j|^2` in the dual norm.
    pub forcing_budget: f64,
    /// `aux - coefficient * forcing_budget`.
    pub compensated: f64,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub rows: Vec<TraceRow>,
    pub coefficient: f64,
    /// Largest increase of the compensated energy between steps.
    pub monotone_violation: f64,
    /// Largest increase of the auxiliary energy itself.
    pub aux_increase: f64,
    /// Smallest `aux - energy`; zero for the piecewise-constant choice.
    pub majorisation_gap: f64,
}

impl EnergyTrace {
    pub fn monotone(&self, tol: f64) -> bool {
        self.monotone_violation <= tol
    }
}

/// Auxiliary energy `E_k = energy(state_k)` with its monotone
/// decomposition using `coefficient = korn / nu_floor`.
pub fn auxiliary_energy(traj: &Trajectory, coefficient: f64) -> Result<EnergyTrace, StepError> {
    let dual = DualNorm::new(&traj.grid)?;
    let h = traj.dt();
    let mut rows = Vec::with_capacity(traj.states.len());
    let mut budget = 0.0;
    for (k, st) in traj.states.iter().enumerate() {
        let parts = energy_parts(st, &traj.params);
        let rep = if k > 0 { Some(&traj.reports[k - 1]) } else { None };
        if k > 0 {
            budget += h * dual.norm_sq(&traj.forcing[k - 1])?;
        }
        let aux = parts.total;
        rows.push(TraceRow {
            step: k,
            t: st.t,
            parts,
            aux,
            diss_visc: rep.map_or(0.0, |r| r.diss_visc),
            diss_gamma: rep.map_or(0.0, |r| r.diss_gamma),
            diss_mix: rep.map_or(0.0, |r| r.diss_mix),
            diss_plastic: rep.map_or(0.0, |r| r.diss_plastic),
            f_work: rep.map_or(0.0, |r| r.f_work),
            forcing_budget: budget,
            compensated: aux - coefficient * budget,
            slack: rep.map_or(0.0, |r| r.slack),
        });
    }
    let (mut mv, mut ai) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for w in rows.windows(2) {
        mv = mv.max(w[1].compensated - w[0].compensated);
        ai = ai.max(w[1].aux - w[0].aux);
    }
    let gap = rows.iter().map(|r| r.aux - r.parts.total).fold(f64::INFINITY, f64::min);
    Ok(EnergyTrace { rows, coefficient, monotone_violation: mv.max(0.0), aux_increase: ai, majorisation_gap: gap })
}

// ---------------------------------------------------------------------------
// Test tuples

/// Smooth time factor `(a0 + a1 t/T + a2 sin(w t)) (1 - t/T)^3`, zero from
/// `T` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub omega: f64,
    pub horizon: f64,
}

impl TimeProfile {
    pub fn value(&self, t: f64) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        let s = t / self.horizon;
        (self.a0 + self.a1 * s + self.a2 * (self.omega * t).sin()) * (1.0 - s).powi(3)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        let s = t / self.horizon;
        let p = self.a0 + self.a1 * s + self.a2 * (self.omega * t).sin();
        let dp = self.a1 / self.horizon + self.a2 * self.omega * (self.omega * t).cos();
        dp * (1.0 - s).powi(3) - 3.0 * p * (1.0 - s).powi(2) / self.horizon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpComponent {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
    pub profile: TimeProfile,
}

impl BumpComponent {
    fn spatial(&self, g: &Grid, bc: Boundary) -> ScalarField {
        ScalarField::from_fn(*g, bc, |x, y| self.amplitude * stepper::radial_bump(x, y, self.center, self.radius))
    }
}

/// Admissible smooth test functions: a solenoidal velocity built as the
/// discrete curl of a stream bump, a trace-free stress bump and two scalar
/// bumps, each separable in space and time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestTuple {
    pub id: String,
    pub stream: Option<BumpComponent>,
    pub stress: Option<(BumpComponent, [f64; 2])>,
    pub phase: Option<BumpComponent>,
    pub chemical: Option<BumpComponent>,
}

/// A test tuple evaluated at one time.
#[derive(Clone, Debug)]
pub struct TupleSample {
    pub v: VectorField,
    pub dv: VectorField,
    pub s: TensorField,
    pub ds: TensorField,
    pub phi: ScalarField,
    pub dphi: ScalarField,
    pub mu: ScalarField,
}

fn scale_scalar(f: &ScalarField, c: f64) -> ScalarField {
    ScalarField { values: f.values.iter().map(|v| v * c).collect(), ..f.clone() }
}

fn scale_vector(f: &VectorField, c: f64) -> VectorField {
    VectorField { x: f.x.iter().map(|v| v * c).collect(), y: f.y.iter().map(|v| v * c).collect(), ..f.clone() }
}

fn scale_tensor(f: &TensorField, c: f64) -> TensorField {
    TensorField { xx: f.xx.iter().map(|v| v * c).collect(), xy: f.xy.iter().map(|v| v * c).collect(), ..f.clone() }
}

impl TestTuple {
    pub fn zero() -> Self {
        Self { id: "zero".into(), stream: None, stress: None, phase: None, chemical: None }
    }

    pub fn is_zero(&self) -> bool {
        self.stream.is_none() && self.stress.is_none() && self.phase.is_none() && self.chemical.is_none()
    }

    /// Spatial parts on `g`; `sample` multiplies by the time profiles.
    pub fn spatial(&self, g: &Grid) -> TupleSpatial {
        let v = match &self.stream {
            Some(b) => {
                let mut psi = b.spatial(g, Boundary::Dirichlet);
                psi.values.iter_mut().for_each(|p| *p *= b.radius);
                VectorField::curl_of(&psi)
            }
            None => VectorField::zeros(*g, Boundary::Dirichlet),
        };
        let s = match &self.stress {
            Some((b, dir)) => {
                let w = b.spatial(g, Boundary::Neumann);
                TensorField {
                    grid: *g,
                    bc: Boundary::Neumann,
                    xx: w.values.iter().map(|a| a * dir[0]).collect(),
                    xy: w.values.iter().map(|a| a * dir[1]).collect(),
                }
            }
            None => TensorField::zeros(*g, Boundary::Neumann),
        };
        let scalar = |c: &Option<BumpComponent>| match c {
            Some(b) => b.spatial(g, Boundary::Neumann),
            None => ScalarField::zeros(*g, Boundary::Neumann),
        };
        TupleSpatial {
            v,
            s,
            phi: scalar(&self.phase),
            mu: scalar(&self.chemical),
            profiles: [
                self.stream.map(|b| b.profile),
                self.stress.map(|b| b.0.profile),
                self.phase.map(|b| b.profile),
                self.chemical.map(|b| b.profile),
            ],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let sc = |b: &BumpComponent| BumpComponent { amplitude: b.amplitude * c, ..*b };
        Self {
            id: format!("{}*{c}", self.id),
            stream: self.stream.as_ref().map(sc),
            stress: self.stress.as_ref().map(|(b, d)| (sc(b), *d)),
            phase: self.phase.as_ref().map(sc),
            chemical: self.chemical.as_ref().map(sc),
        }
    }
}

pub struct TupleSpatial {
    pub v: VectorField,
    pub s: TensorField,
    pub phi: ScalarField,
    pub mu: ScalarField,
    profiles: [Option<TimeProfile>; 4],
}

impl TupleSpatial {
    pub fn sample(&self, t: f64) -> TupleSample {
        let val = |p: &Option<TimeProfile>| p.map_or((0.0, 0.0), |p| (p.value(t), p.derivative(t)));
        let (a, da) = val(&self.profiles[0]);
        let (b, db) = val(&self.profiles[1]);
        let (c, dc) = val(&self.profiles[2]);
        let (d, _) = val(&self.profiles[3]);
        TupleSample {
            v: scale_vector(&self.v, a),
            dv: scale_vector(&self.v, da),
            s: scale_tensor(&self.s, b),
            ds: scale_tensor(&self.s, db),
            phi: scale_scalar(&self.phi, c),
            dphi: scale_scalar(&self.phi, dc),
            mu: scale_scalar(&self.mu, d),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleKind {
    Velocity,
    Stress,
    Phase,
    Chemical,
    Mixed,
}

fn random_bump(rng: &mut ChaCha8Rng, g: &Grid, amplitude: f64, horizon: f64) -> BumpComponent {
    let rmax = 0.35 * g.lx.min(g.ly);
    let radius = rng.random_range(0.5 * rmax..rmax);
    // Independent of the resolution so that refined runs see the same tuple.
    let margin = radius + 0.05 * g.lx.min(g.ly);
    let center = [rng.random_range(margin..g.lx - margin), rng.random_range(margin..g.ly - margin)];
    let profile = TimeProfile {
        a0: rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        a1: rng.random_range(-0.5..0.5),
        a2: rng.random_range(-0.5..0.5),
        omega: rng.random_range(1.0..2.0 * std::f64::consts::PI / horizon.max(1e-12) * 2.0),
        horizon,
    };
    BumpComponent { center, radius, amplitude, profile }
}

/// A seeded analytic test tuple. Amplitudes are absolute: the stream bump
/// scales the velocity, the stress bump its Frobenius size.
pub fn make_test_tuple(kind: TupleKind, amplitude: f64, g: &Grid, horizon: f64, seed: u64) -> TestTuple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = TestTuple { id: format!("{kind:?}-{seed}").to_lowercase(), ..TestTuple::zero() };
    let want = |k: TupleKind| kind == k || kind == TupleKind::Mixed;
    if want(TupleKind::Velocity) {
        t.stream = Some(random_bump(&mut rng, g, amplitude, horizon));
    }
    if want(TupleKind::Stress) {
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        // Unit Frobenius direction in (xx, xy) storage.
        let dir = [th.cos() / std::f64::consts::SQRT_2, th.sin() / std::f64::consts::SQRT_2];
        t.stress = Some((random_bump(&mut rng, g, amplitude, horizon), dir));
    }
    if want(TupleKind::Phase) {
        t.phase = Some(random_bump(&mut rng, g, amplitude, horizon));
    }
    if want(TupleKind::Chemical) {
        t.chemical = Some(random_bump(&mut rng, g, amplitude, horizon));
    }
    t
}

/// `count` tuples cycling through the kinds, seeded from `seed`.
pub fn make_battery(count: usize, amplitude: f64, g: &Grid, horizon: f64, seed: u64) -> Vec<TestTuple> {
    const KINDS: [TupleKind; 5] = [TupleKind::Velocity, TupleKind::Stress, TupleKind::Phase, TupleKind::Chemical, TupleKind::Mixed];
    (0..count).map(|i| make_test_tuple(KINDS[i % KINDS.len()], amplitude, g, horizon, seed.wrapping_add(i as u64))).collect()
}

/// Rejects tuples that are not admissible on `g`: discrete divergence of
/// the velocity, phase range for the dissipative inequality, yield bound.
pub fn check_tuple(tt: &TestTuple, g: &Grid, params: &ModelParams) -> Result<(), StepError> {
    let sp = tt.spatial(g);
    let div = grid::divergence(&sp.v).max_abs();
    if div > 1e-10 * (1.0 + sp.v.max_norm() / g.dx().min(g.dy())) {
        return Err(StepError::Invalid(format!("test velocity of {} has divergence {div:e}", tt.id)));
    }
    let peak = |p: Option<&BumpComponent>| p.map_or(0.0, |b| b.amplitude.abs() * (b.profile.a0.abs() + b.profile.a1.abs() + b.profile.a2.abs()));
    let phi_peak = peak(tt.phase.as_ref());
    let limit = match params.phase {
        PhaseModel::Obstacle => 1.0,
        _ => 1.0 - 1e-9,
    };
    if phi_peak >= limit {
        return Err(StepError::Invalid(format!("test phase of {} reaches {phi_peak}", tt.id)));
    }
    if peak(tt.stress.as_ref().map(|(b, _)| b)) > params.materials.yield_stress {
        return Err(StepError::Invalid(format!("test stress of {} exceeds the yield stress", tt.id)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pointwise pairings

/// `sum u_i m_j d_j w_i` (area-weighted), with `d_j w_i = gw[i][j]`.
fn transport_pairing(g: &Grid, u: (&[f64], &[f64]), m: (&[f64], &[f64]), gw: &GradientField) -> f64 {
    let mut acc = 0.0;
    for k in 0..g.len() {
        acc += u.0[k] * (m.0[k] * gw.xx[k] + m.1[k] * gw.xy[k]) + u.1[k] * (m.0[k] * gw.yx[k] + m.1[k] * gw.yy[k]);
    }
    acc * g.cell_area()
}

/// Frobenius pairing of a trace-free symmetric tensor with a full gradient.
fn tensor_gradient_pairing(g: &Grid, w: &[f64], s: &TensorField, gv: &GradientField) -> f64 {
    let mut acc = 0.0;
    for k in 0..g.len() {
        acc += w[k] * (s.xx[k] * (gv.xx[k] - gv.yy[k]) + s.xy[k] * (gv.xy[k] + gv.yx[k]));
    }
    acc * g.cell_area()
}

/// `sum S_ij u_k d_k T_ij` with Frobenius weights.
fn tensor_transport_pairing(s: &TensorField, u: &VectorField, t: &TensorField) -> f64 {
    let g = &s.grid;
    let gt = ops::tensor_gradient(t);
    let mut acc = 0.0;
    for k in 0..g.len() {
        let dxx = u.x[k] * gt.xx[0][k] + u.y[k] * gt.xx[1][k];
        let dxy = u.x[k] * gt.xy[0][k] + u.y[k] * gt.xy[1][k];
        acc += 2.0 * (s.xx[k] * dxx + s.xy[k] * dxy);
    }
    acc * g.cell_area()
}

fn sub_vector(a: &VectorField, b: &VectorField) -> VectorField {
    VectorField { x: a.x.iter().zip(&b.x).map(|(p, q)| p - q).collect(), y: a.y.iter().zip(&b.y).map(|(p, q)| p - q).collect(), ..a.clone() }
}

fn sub_tensor(a: &TensorField, b: &TensorField) -> TensorField {
    TensorField { xx: a.xx.iter().zip(&b.xx).map(|(p, q)| p - q).collect(), xy: a.xy.iter().zip(&b.xy).map(|(p, q)| p - q).collect(), ..a.clone() }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}

fn flux(params: &ModelParams, phi: &[f64], mu: &ScalarField) -> (Vec<f64>, Vec<f64>) {
    let gm = grid::gradient(mu);
    params.materials.mass_flux(phi, &gm.x, &gm.y)
}

// ---------------------------------------------------------------------------
// Energy-variational inequality

/// Per-step terms of the energy-variational inequality for one tuple. The
/// state on `(t_k, t_k+1]` is `states[k+1]`, coefficients are lagged at
/// `phi_k` as in the scheme, and the tuple is sampled at `t_k`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvsLedger {
    pub h: f64,
    /// `E_k`, `<rho v, v~>`, `<S, S~>`, `<phi, phi~>` at grid times.
    pub energy: Vec<f64>,
    pub pair_momentum: Vec<f64>,
    pub pair_stress: Vec<f64>,
    pub pair_phase: Vec<f64>,
    /// Per-step integrands (not multiplied by `h`).
    pub dissipation: Vec<f64>,
    pub plastic: Vec<f64>,
    pub plastic_test: Vec<f64>,
    pub momentum: Vec<f64>,
    pub stress: Vec<f64>,
    pub phase: Vec<f64>,
    pub chemical: Vec<f64>,
    pub work: Vec<f64>,
    pub work_test: Vec<f64>,
    pub weight: Vec<f64>,
    pub energy_gap: Vec<f64>,
    /// `h(<xi, S> - P(S))` per step: the gap between the plastic pairing
    /// used by the scheme and the potential in the inequality.
    pub plastic_gap: Vec<f64>,
}

fn range_sum(v: &[f64], a: usize, b: usize) -> f64 {
    v[a..b].iter().sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvsBreakdown {
    pub slack: f64,
    /// Energy part: `f-work + E_a - E_b - dissipation - P(S) + P(S~)`.
    pub energy: f64,
    pub residual_momentum: f64,
    pub residual_stress: f64,
    pub residual_phase: f64,
    pub residual_chemical: f64,
}

impl EvsLedger {
    pub fn steps(&self) -> usize {
        self.dissipation.len()
    }

    /// Weak momentum residual (left minus right side) on `[t_a, t_b]`.
    pub fn residual_momentum(&self, a: usize, b: usize) -> f64 {
        self.pair_momentum[b] - self.pair_momentum[a] - self.h * (range_sum(&self.momentum, a, b) + range_sum(&self.work_test, a, b))
    }

    pub fn residual_stress(&self, a: usize, b: usize) -> f64 {
        self.pair_stress[b] - self.pair_stress[a] - self.h * range_sum(&self.stress, a, b)
    }

    pub fn residual_phase(&self, a: usize, b: usize) -> f64 {
        self.pair_phase[b] - self.pair_phase[a] - self.h * range_sum(&self.phase, a, b)
    }

    pub fn residual_chemical(&self, a: usize, b: usize) -> f64 {
        -self.h * range_sum(&self.chemical, a, b)
    }

    /// Right minus left side of the inequality on `[t_a, t_b]`.
    pub fn breakdown(&self, a: usize, b: usize) -> EvsBreakdown {
        let h = self.h;
        let weight: f64 = (a..b).map(|k| self.weight[k] * self.energy_gap[k]).sum();
        let energy = h * (range_sum(&self.work, a, b) + weight) + self.energy[a]
            - self.energy[b]
            - h * (range_sum(&self.dissipation, a, b) + range_sum(&self.plastic, a, b) - range_sum(&self.plastic_test, a, b));
        let rm = self.residual_momentum(a, b);
        let rs = self.residual_stress(a, b);
        let rp = self.residual_phase(a, b);
        let rc = self.residual_chemical(a, b);
        EvsBreakdown { slack: energy - rm - rs - rp - rc, energy, residual_momentum: rm, residual_stress: rs, residual_phase: rp, residual_chemical: rc }
    }

    pub fn slack(&self, a: usize, b: usize) -> f64 {
        if a >= b {
            return 0.0;
        }
        self.breakdown(a, b).slack
    }

    /// Sum of the plastic gaps on `[t_a, t_b]`.
    pub fn plastic_gap(&self, a: usize, b: usize) -> f64 {
        range_sum(&self.plastic_gap, a, b)
    }
}

pub fn evs_ledger(traj: &Trajectory, tt: &TestTuple, weight: &RegularityWeight) -> Result<EvsLedger, StepError> {
    let g = traj.grid;
    check_tuple(tt, &g, &traj.params)?;
    let params = &traj.params;
    let mat = &params.materials;
    let gamma = mat.stress_diffusion;
    let h = traj.dt();
    let nsteps = traj.reports.len();
    let sp = tt.spatial(&g);
    let zero = tt.is_zero();
    let mut led = EvsLedger { h, ..Default::default() };

    for (k, st) in traj.states.iter().enumerate() {
        let ts = sp.sample(traj.time.time(k));
        let e = total_energy(st, params);
        led.energy.push(e);
        if zero {
            led.pair_momentum.push(0.0);
            led.pair_stress.push(0.0);
            led.pair_phase.push(0.0);
            continue;
        }
        let rho = mat.densities(&st.phi.values);
        led.pair_momentum.push(grid::dot(&g, &rho.iter().zip(&st.v.x).map(|(r, v)| r * v).collect::<Vec<_>>(), &ts.v.x) + grid::dot(&g, &rho.iter().zip(&st.v.y).map(|(r, v)| r * v).collect::<Vec<_>>(), &ts.v.y));
        led.pair_stress.push(grid::inner_tensor(&st.s, &ts.s));
        led.pair_phase.push(grid::inner_scalar(&st.phi, &ts.phi));
    }

    for k in 0..nsteps {
        let prev = &traj.states[k];
        let st = &traj.states[k + 1];
        let rep = &traj.reports[k];
        let f = &traj.forcing[k];
        let ts = sp.sample(traj.time.time(k));
        let phi_k = &prev.phi.values;
        let nu = mat.viscosity.values(phi_k);
        let eta = mat.elastic_modulus.values(phi_k);
        let a_cells = mat.plastic_modulus.values(phi_k);
        let mob = ops::face_weights(&g, &mat.mobility.values(phi_k));
        let da = g.cell_area();

        led.dissipation.push((rep.diss_visc + rep.diss_gamma + rep.diss_mix) / h);
        let p_s: f64 = (0..g.len()).map(|c| PlasticPotential::density_with(a_cells[c], mat.yield_stress, [st.s.xx[c], st.s.xy[c]])).sum::<f64>() * da;
        led.plastic.push(p_s);
        led.plastic_gap.push(rep.diss_plastic - h * p_s);
        led.work.push(grid::inner_vector(f, &st.v));
        led.energy_gap.push(led.energy[k + 1] - total_energy(st, params));
        led.weight.push(weight.value(&ts.s));
        if zero {
            for v in [&mut led.plastic_test, &mut led.momentum, &mut led.stress, &mut led.phase, &mut led.chemical, &mut led.work_test] {
                v.push(0.0);
            }
            continue;
        }
        let p_t: f64 = (0..g.len()).map(|c| PlasticPotential::density_with(a_cells[c], mat.yield_stress, [ts.s.xx[c], ts.s.xy[c]])).sum::<f64>() * da;
        led.plastic_test.push(p_t);
        led.work_test.push(grid::inner_vector(f, &ts.v));

        // Momentum terms.
        let rho_new = mat.densities(&st.phi.values);
        let rho_old = mat.densities(phi_k);
        let gv = grid::velocity_gradient(&ts.v);
        let (jx, jy) = flux(params, phi_k, &st.mu);
        let mx: Vec<f64> = (0..g.len()).map(|c| rho_old[c] * st.v.x[c] + jx[c]).collect();
        let my: Vec<f64> = (0..g.len()).map(|c| rho_old[c] * st.v.y[c] + jy[c]).collect();
        let gphi = grid::gradient(&st.phi);
        let mut m = grid::dot(&g, &rho_new.iter().zip(&st.v.x).map(|(r, v)| r * v).collect::<Vec<_>>(), &ts.dv.x)
            + grid::dot(&g, &rho_new.iter().zip(&st.v.y).map(|(r, v)| r * v).collect::<Vec<_>>(), &ts.dv.y);
        m += transport_pairing(&g, (&st.v.x, &st.v.y), (&mx, &my), &gv);
        m -= ops::viscous_form(&g, &nu, &st.v, &ts.v);
        let eta_s = TensorField { xx: (0..g.len()).map(|c| eta[c] * st.s.xx[c]).collect(), xy: (0..g.len()).map(|c| eta[c] * st.s.xy[c]).collect(), ..st.s.clone() };
        m -= grid::inner_tensor(&eta_s, &ops::strain_dev(&ts.v));
        m += transport_pairing(&g, (&gphi.x, &gphi.y), (&gphi.x, &gphi.y), &gv);
        led.momentum.push(m);

        // Stress terms.
        let mut s = grid::inner_tensor(&st.s, &ts.ds);
        s += tensor_transport_pairing(&st.s, &st.v, &ts.s);
        s -= grid::inner_tensor(&ops::jaumann(&st.s, &ops::spin(&st.v)), &ts.s);
        s -= gamma * ops::tensor_face_form(&st.s, &ts.s);
        let sd = ops::strain_dev(&st.v);
        let eta_d = TensorField { xx: (0..g.len()).map(|c| eta[c] * sd.xx[c]).collect(), xy: (0..g.len()).map(|c| eta[c] * sd.xy[c]).collect(), ..sd };
        s += grid::inner_tensor(&eta_d, &ts.s);
        led.stress.push(s);

        // Phase terms.
        let adv = ops::scalar_advection(&st.v, &prev.phi);
        let p = grid::inner_scalar(&st.phi, &ts.dphi) - grid::dot(&g, &adv, &ts.phi.values) - ops::weighted_face_form(&g, &mob, &st.mu.values, &ts.phi.values);
        led.phase.push(p);

        // Chemical potential relation.
        let lap = grid::face_operator(&g, &st.phi.values, None, None);
        let r: Vec<f64> = (0..g.len()).map(|c| st.mu.values[c] - (lap[c] + double_well::d1(st.phi.values[c]) + st.beta.values[c])).collect();
        led.chemical.push(grid::dot(&g, &r, &ts.mu.values));
    }
    Ok(led)
}

// ---------------------------------------------------------------------------
// Weak-form and pointwise residuals

pub fn check_weak_momentum(traj: &Trajectory, test: &TestTuple, a: usize, b: usize) -> Result<f64, StepError> {
    let only = TestTuple { stress: None, phase: None, chemical: None, ..test.clone() };
    Ok(evs_ledger(traj, &only, &RegularityWeight::Zero)?.residual_momentum(a, b))
}

pub fn check_weak_ch(traj: &Trajectory, test: &TestTuple, a: usize, b: usize) -> Result<f64, StepError> {
    let only = TestTuple { stream: None, stress: None, chemical: None, ..test.clone() };
    Ok(evs_ledger(traj, &only, &RegularityWeight::Zero)?.residual_phase(a, b))
}

/// Phase relation residual with a general (not necessarily compactly
/// supported) scalar test field held constant in time.
pub fn check_weak_ch_field(traj: &Trajectory, zeta: &ScalarField, a: usize, b: usize) -> f64 {
    let g = traj.grid;
    let mat = &traj.params.materials;
    let h = traj.dt();
    let mut r = grid::inner_scalar(&traj.states[b].phi, zeta) - grid::inner_scalar(&traj.states[a].phi, zeta);
    for k in a..b {
        let prev = &traj.states[k];
        let st = &traj.states[k + 1];
        let mob = ops::face_weights(&g, &mat.mobility.values(&prev.phi.values));
        let adv = ops::scalar_advection(&st.v, &prev.phi);
        r -= h * (-grid::dot(&g, &adv, &zeta.values) - ops::weighted_face_form(&g, &mob, &st.mu.values, &zeta.values));
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsThomsonRow {
    pub step: usize,
    /// `max |mu - (-lap phi + W_dw'(phi) + beta)|`.
    pub raw: f64,
    /// Largest splitting correction `kappa (phi - phi_prev) / 2`.
    pub splitting: f64,
    /// Residual after removing the splitting correction.
    pub corrected: f64,
    pub complementarity: f64,
}

pub fn check_gibbs_thomson(traj: &Trajectory) -> Vec<GibbsThomsonRow> {
    let g = traj.grid;
    let kappa = traj.params.kappa;
    (1..traj.states.len())
        .map(|k| {
            let st = &traj.states[k];
            let prev = &traj.states[k - 1];
            let lap = grid::face_operator(&g, &st.phi.values, None, None);
            let (mut raw, mut split, mut corr) = (0.0f64, 0.0f64, 0.0f64);
            for c in 0..g.len() {
                let r = st.mu.values[c] - (lap[c] + double_well::d1(st.phi.values[c]) + st.beta.values[c]);
                let s = 0.5 * kappa * (st.phi.values[c] - prev.phi.values[c]);
                raw = raw.max(r.abs());
                split = split.max(s.abs());
                corr = corr.max((r - s).abs());
            }
            let complementarity = match traj.params.phase {
                PhaseModel::Obstacle => potentials::complementarity_residual(&st.phi.values, &st.beta.values),
                _ => 0.0,
            };
            GibbsThomsonRow { step: k, raw, splitting: split, corrected: corr, complementarity }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Relative energy, system operator, relative dissipation

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeEnergy {
    pub kinetic: f64,
    pub elastic: f64,
    pub phase: f64,
    pub total: f64,
}

fn convexified_d1(params: &ModelParams, s: f64) -> f64 {
    params.phase.d1(s) + params.kappa * s
}

pub fn relative_energy(state: &SimState, ts: &TupleSample, params: &ModelParams) -> RelativeEnergy {
    let g = *state.grid();
    let da = g.cell_area();
    let mat = &params.materials;
    let dv = sub_vector(&state.v, &ts.v);
    let ds = sub_tensor(&state.s, &ts.s);
    let dphi = sub(&state.phi.values, &ts.phi.values);
    let mut kin = 0.0;
    let mut pot = 0.0;
    for k in 0..g.len() {
        kin += 0.5 * mat.density(state.phi.values[k]) * (dv.x[k].powi(2) + dv.y[k].powi(2));
        let (p, q) = (state.phi.values[k], ts.phi.values[k]);
        pot += params.convexified(p) - params.convexified(q) - convexified_d1(params, q) * (p - q);
    }
    let kinetic = kin * da;
    let elastic = 0.5 * grid::inner_tensor(&ds, &ds);
    let phase = 0.5 * grid::face_gradient_sq(&g, &dphi) + pot * da;
    RelativeEnergy { kinetic, elastic, phase, total: kinetic + elastic + phase }
}

/// Residual fields of the system operator applied to a test state, plus
/// the chemical potential the operator assigns to it.
#[derive(Clone, Debug)]
pub struct SystemResidual {
    pub momentum: VectorField,
    pub stress: TensorField,
    pub phase: ScalarField,
    pub chemical: ScalarField,
}

fn test_chemical(ts: &TupleSample, params: &ModelParams) -> ScalarField {
    let g = ts.phi.grid;
    let lap = grid::face_operator(&g, &ts.phi.values, None, None);
    let values = (0..g.len())
        .map(|k| {
            let p = ts.phi.values[k];
            // The obstacle subdifferential is represented by zero for tests.
            lap[k] + double_well::d1(p) + params.phase.singular_d1(p)
        })
        .collect();
    ScalarField { grid: g, bc: Boundary::Neumann, values }
}

/// Central divergence of a full (not necessarily symmetric) tensor field
/// given by its four components.
fn tensor_divergence(g: &Grid, txx: &[f64], txy: &[f64], tyx: &[f64], tyy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = |u: &[f64], a| grid::diff(g, a, Stencil::Central, Boundary::Neumann, u);
    let x = d(txx, Axis::X).iter().zip(d(txy, Axis::Y)).map(|(a, b)| a + b).collect();
    let y = d(tyx, Axis::X).iter().zip(d(tyy, Axis::Y)).map(|(a, b)| a + b).collect();
    (x, y)
}

pub fn system_operator(ts: &TupleSample, params: &ModelParams, forcing: &VectorField) -> SystemResidual {
    let g = ts.phi.grid;
    let n = g.len();
    let mat = &params.materials;
    let phi = &ts.phi.values;
    let mu = test_chemical(ts, params);
    let rho = mat.densities(phi);
    let nu = mat.viscosity.values(phi);
    let eta = mat.elastic_modulus.values(phi);
    let jump = mat.density_jump();
    let (jx, jy) = flux(params, phi, &mu);
    let gv = grid::velocity_gradient(&ts.v);
    let gphi = grid::gradient(&ts.phi);
    let v = &ts.v;

    // Convective flux v (x) (rho v + J).
    let mx: Vec<f64> = (0..n).map(|k| rho[k] * v.x[k] + jx[k]).collect();
    let my: Vec<f64> = (0..n).map(|k| rho[k] * v.y[k] + jy[k]).collect();
    let (cx, cy) = tensor_divergence(
        &g,
        &(0..n).map(|k| v.x[k] * mx[k]).collect::<Vec<_>>(),
        &(0..n).map(|k| v.x[k] * my[k]).collect::<Vec<_>>(),
        &(0..n).map(|k| v.y[k] * mx[k]).collect::<Vec<_>>(),
        &(0..n).map(|k| v.y[k] * my[k]).collect::<Vec<_>>(),
    );
    // Deviatoric stress eta S + 2 nu sym grad v.
    let txx: Vec<f64> = (0..n).map(|k| eta[k] * ts.s.xx[k] + 2.0 * nu[k] * gv.xx[k]).collect();
    let tyy: Vec<f64> = (0..n).map(|k| -eta[k] * ts.s.xx[k] + 2.0 * nu[k] * gv.yy[k]).collect();
    let txy: Vec<f64> = (0..n).map(|k| eta[k] * ts.s.xy[k] + nu[k] * (gv.xy[k] + gv.yx[k])).collect();
    let (sx, sy) = tensor_divergence(&g, &txx, &txy, &txy, &tyy);
    let momentum = VectorField {
        grid: g,
        bc: Boundary::Dirichlet,
        x: (0..n).map(|k| rho[k] * ts.dv.x[k] + jump * ts.dphi.values[k] * v.x[k] + cx[k] - sx[k] - mu.values[k] * gphi.x[k] - forcing.x[k]).collect(),
        y: (0..n).map(|k| rho[k] * ts.dv.y[k] + jump * ts.dphi.values[k] * v.y[k] + cy[k] - sy[k] - mu.values[k] * gphi.y[k] - forcing.y[k]).collect(),
    };

    let gt = ops::tensor_gradient(&ts.s);
    let jm = ops::jaumann(&ts.s, &ops::spin(v));
    let lxx = grid::face_operator(&g, &ts.s.xx, None, None);
    let lxy = grid::face_operator(&g, &ts.s.xy, None, None);
    let sd = ops::strain_dev(v);
    let gamma = mat.stress_diffusion;
    let stress = TensorField {
        grid: g,
        bc: Boundary::Neumann,
        xx: (0..n).map(|k| ts.ds.xx[k] + v.x[k] * gt.xx[0][k] + v.y[k] * gt.xx[1][k] + jm.xx[k] + gamma * lxx[k] - eta[k] * sd.xx[k]).collect(),
        xy: (0..n).map(|k| ts.ds.xy[k] + v.x[k] * gt.xy[0][k] + v.y[k] * gt.xy[1][k] + jm.xy[k] + gamma * lxy[k] - eta[k] * sd.xy[k]).collect(),
    };

    let mob = ops::face_weights(&g, &mat.mobility.values(phi));
    let lm = ops::weighted_neg_laplacian(&g, &mob, &mu.values);
    let phase = ScalarField {
        grid: g,
        bc: Boundary::Neumann,
        values: (0..n).map(|k| ts.dphi.values[k] + v.x[k] * gphi.x[k] + v.y[k] * gphi.y[k] + lm[k]).collect(),
    };
    SystemResidual { momentum, stress, phase, chemical: mu }
}

/// Relative dissipation of `state` (with coefficients lagged at
/// `phi_lag`) against a test state, without the weight times relative
/// energy term.
pub fn relative_dissipation(state: &SimState, phi_lag: &ScalarField, ts: &TupleSample, mu_test: &ScalarField, params: &ModelParams) -> f64 {
    let g = *state.grid();
    let n = g.len();
    let mat = &params.materials;
    let gamma = mat.stress_diffusion;
    let kappa = params.kappa;
    let lag = &phi_lag.values;
    let nu = mat.viscosity.values(lag);
    let eta = mat.elastic_modulus.values(lag);
    let mob = ops::face_weights(&g, &mat.mobility.values(lag));
    let nu_t = mat.viscosity.values(&ts.phi.values);
    let eta_t = mat.elastic_modulus.values(&ts.phi.values);
    let mob_t = ops::face_weights(&g, &mat.mobility.values(&ts.phi.values));
    let rho = mat.densities(&state.phi.values);
    let rho_t = mat.densities(&ts.phi.values);

    let dv = sub_vector(&state.v, &ts.v);
    let ds = sub_tensor(&state.s, &ts.s);
    let dphi = ScalarField { values: sub(&state.phi.values, &ts.phi.values), ..state.phi.clone() };
    let dmu = sub(&state.mu.values, &mu_test.values);
    let gv_t = grid::velocity_gradient(&ts.v);
    let gdv = grid::velocity_gradient(&dv);
    let da = g.cell_area();

    let mut w = gamma * ops::tensor_face_form(&ds, &ds);
    w += ops::weighted_face_form(&g, &mob, &dmu, &dmu);
    w += ops::viscous_form(&g, &nu, &dv, &dv);
    // 2 (nu - nu~) sym grad v~ : grad (v - v~)
    let mut acc = 0.0;
    for k in 0..n {
        let sxy = 0.5 * (gv_t.xy[k] + gv_t.yx[k]);
        acc += 2.0 * (nu[k] - nu_t[k]) * (gv_t.xx[k] * gdv.xx[k] + gv_t.yy[k] * gdv.yy[k] + sxy * (gdv.xy[k] + gdv.yx[k]));
    }
    w += acc * da;
    w += ops::weighted_face_form(&g, &mob, &mu_test.values, &dmu);
    // div(m~ grad mu~) (-lap(phi - phi~) + W''(phi~)(phi - phi~))
    let div_m = ops::weighted_neg_laplacian(&g, &mob_t, &mu_test.values);
    let lap_d = grid::face_operator(&g, &dphi.values, None, None);
    let mut acc = 0.0;
    for k in 0..n {
        let q = lap_d[k] + params.phase.d2(ts.phi.values[k]) * dphi.values[k];
        acc += -div_m[k] * q;
    }
    w += acc * da;
    // (v - v~) (x) (rho v - rho~ v~ + J - J~) : grad v~ + (rho - rho~)(v - v~) . dt v~
    let (jx, jy) = flux(params, lag, &state.mu);
    let (jtx, jty) = flux(params, &ts.phi.values, mu_test);
    let mx: Vec<f64> = (0..n).map(|k| rho[k] * state.v.x[k] - rho_t[k] * ts.v.x[k] + jx[k] - jtx[k]).collect();
    let my: Vec<f64> = (0..n).map(|k| rho[k] * state.v.y[k] - rho_t[k] * ts.v.y[k] + jy[k] - jty[k]).collect();
    w += transport_pairing(&g, (&dv.x, &dv.y), (&mx, &my), &gv_t);
    let mut acc = 0.0;
    for k in 0..n {
        acc += (rho[k] - rho_t[k]) * (dv.x[k] * ts.dv.x[k] + dv.y[k] * ts.dv.y[k]);
    }
    w += acc * da;
    // -(eta - eta~)(S - S~) : grad v~ - (eta - eta~) S~ : grad (v - v~)
    let deta: Vec<f64> = (0..n).map(|k| eta[k] - eta_t[k]).collect();
    w -= tensor_gradient_pairing(&g, &deta, &ds, &gv_t);
    w -= tensor_gradient_pairing(&g, &deta, &ts.s, &gdv);
    // -(S - S~) (x) (v - v~) : grad S~ - 2 (S - S~) skw grad(v - v~) : S~
    w -= tensor_transport_pairing(&ds, &dv, &ts.s);
    let spin_d = ops::spin(&dv);
    let mut acc = 0.0;
    for k in 0..n {
        acc += 4.0 * spin_d[k] * (ds.xx[k] * ts.s.xy[k] - ds.xy[k] * ts.s.xx[k]);
    }
    w -= acc * da;
    // -mu~ grad(phi - phi~) . (v - v~) + grad(phi - phi~) (x) grad(phi - phi~) : grad v~
    let gd = grid::gradient(&dphi);
    let mut acc = 0.0;
    for k in 0..n {
        acc -= mu_test.values[k] * (gd.x[k] * dv.x[k] + gd.y[k] * dv.y[k]);
    }
    w += acc * da;
    w += transport_pairing(&g, (&gd.x, &gd.y), (&gd.x, &gd.y), &gv_t);
    // kappa grad(mu - mu~) . grad(phi - phi~) + kappa (v - v~) . grad phi~ (phi - phi~)
    let ones = [vec![1.0; n], vec![1.0; n]];
    w += kappa * ops::weighted_face_form(&g, &ones, &dmu, &dphi.values);
    let gpt = grid::gradient(&ts.phi);
    let mut acc = 0.0;
    for k in 0..n {
        acc += kappa * (dv.x[k] * gpt.x[k] + dv.y[k] * gpt.y[k]) * dphi.values[k];
    }
    w += acc * da;
    w
}

/// Pairing of the system operator with the state difference, with the
/// phase component tested against the linearised chemical potential.
pub fn system_pairing(state: &SimState, ts: &TupleSample, res: &SystemResidual, params: &ModelParams) -> f64 {
    let g = *state.grid();
    let n = g.len();
    let dv = sub_vector(&state.v, &ts.v);
    let ds = sub_tensor(&state.s, &ts.s);
    let dphi = sub(&state.phi.values, &ts.phi.values);
    let lap = grid::face_operator(&g, &dphi, None, None);
    let jump = params.materials.density_jump();
    let q: Vec<f64> = (0..n)
        .map(|k| {
            lap[k] + (params.phase.d2(ts.phi.values[k]) + params.kappa) * dphi[k] - jump * (dv.x[k] * ts.v.x[k] + dv.y[k] * ts.v.y[k])
        })
        .collect();
    grid::inner_vector(&res.momentum, &dv) + grid::inner_tensor(&res.stress, &ds) + grid::dot(&g, &res.phase.values, &q)
}

/// Per-step terms of the dissipative inequality for one tuple.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DissipativeLedger {
    pub h: f64,
    /// Relative energy at grid times (tuple at the same time).
    pub relative: Vec<f64>,
    /// Per-step integrand: operator pairing, plastic difference and
    /// relative dissipation including the weight term.
    pub integrand: Vec<f64>,
    pub weight: Vec<f64>,
    /// Smallest relative energy seen; non-negative by convexity.
    pub min_relative: f64,
}

impl DissipativeLedger {
    /// Right minus left side of the Gronwall-weighted estimate on
    /// `[t_a, t_b]` started from the state at `t_a`.
    pub fn slack(&self, a: usize, b: usize) -> f64 {
        if a >= b {
            return 0.0;
        }
        let h = self.h;
        let mut tail = 0.0;
        let mut integral = 0.0;
        for k in (a..b).rev() {
            tail += h * self.weight[k];
            integral += h * self.integrand[k] * tail.exp();
        }
        self.relative[a] * tail.exp() - self.relative[b] - integral
    }
}

pub fn dissipative_ledger(traj: &Trajectory, tt: &TestTuple, weight: &RegularityWeight) -> Result<DissipativeLedger, StepError> {
    let g = traj.grid;
    check_tuple(tt, &g, &traj.params)?;
    let params = &traj.params;
    let mat = &params.materials;
    let h = traj.dt();
    let sp = tt.spatial(&g);
    let mut led = DissipativeLedger { h, min_relative: f64::INFINITY, ..Default::default() };
    for (k, st) in traj.states.iter().enumerate() {
        let ts = sp.sample(traj.time.time(k));
        let r = relative_energy(st, &ts, params).total;
        led.min_relative = led.min_relative.min(r);
        led.relative.push(r);
    }
    for k in 0..traj.reports.len() {
        let prev = &traj.states[k];
        let st = &traj.states[k + 1];
        // The implicit step places the new state at the right endpoint; the
        // test state is taken at the same time so that differences match.
        let ts = sp.sample(traj.time.time(k + 1));
        let res = system_operator(&ts, params, &traj.forcing[k]);
        let a_cells = mat.plastic_modulus.values(&prev.phi.values);
        let da = g.cell_area();
        let p_diff: f64 = (0..g.len())
            .map(|c| {
                PlasticPotential::density_with(a_cells[c], mat.yield_stress, [st.s.xx[c], st.s.xy[c]])
                    - PlasticPotential::density_with(a_cells[c], mat.yield_stress, [ts.s.xx[c], ts.s.xy[c]])
            })
            .sum::<f64>()
            * da;
        let kw = weight.value(&ts.s);
        let wr = kw * relative_energy(st, &ts, params).total;
        let integrand = system_pairing(st, &ts, &res, params) + p_diff + relative_dissipation(st, &prev.phi, &ts, &res.chemical, params) + wr;
        led.integrand.push(integrand);
        led.weight.push(kw);
    }
    Ok(led)
}

// ---------------------------------------------------------------------------
// Time sampling and discretisation tolerance

/// Step indices of a uniform sample of `[0, T]` with `points` entries.
pub fn sample_indices(steps: usize, points: usize) -> Vec<usize> {
    let points = points.max(2);
    let mut idx: Vec<usize> = (0..points).map(|i| ((i * steps) as f64 / (points - 1) as f64).round() as usize).collect();
    idx.dedup();
    idx
}

/// All ordered pairs `a < b` of the sample.
pub fn sample_pairs(idx: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &a) in idx.iter().enumerate() {
        for &b in &idx[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Richardson estimate of the discretisation error of a quantity computed
/// at `(h, dx)`, from its values at `(h/2, dx)` and `(h, dx/2)`; first
/// order in time and second order in space.
pub fn richardson_tolerance(base: f64, half_step: f64, half_cell: f64) -> f64 {
    2.0 * (base - half_step).abs() + (4.0 / 3.0) * (base - half_cell).abs()
}

/// Absolute solver tolerance attached to every slack.
pub fn solver_tolerance(energy_scale: f64) -> f64 {
    1e-8 * (1.0 + energy_scale.abs())
}

// ---------------------------------------------------------------------------
// Uniform bounds for the potential sweep

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UniformBounds {
    /// `sup_t |v|_L2`
    pub velocity: f64,
    /// `sup_t |S|_L2`
    pub stress: f64,
    /// `sup_t |grad phi|_L2`
    pub phase_gradient: f64,
    /// `|grad mu|_L2L2`
    pub chemical_gradient: f64,
    /// `sup_t int F(phi)`
    pub entropy: f64,
    /// `|lap phi|_L2L2`
    pub laplacian: f64,
    /// `|beta|_L2L2`
    pub multiplier: f64,
    /// Largest distance of the phase to `[-1, 1]`.
    pub distance_to_box: f64,
    /// Space-time integral of the singular potential.
    pub singular_energy: f64,
}

pub fn uniform_bounds(traj: &Trajectory) -> Result<UniformBounds, StepError> {
    let g = traj.grid;
    let h = traj.dt();
    let mob = &traj.params.materials.mobility;
    let mut b = UniformBounds::default();
    for (k, st) in traj.states.iter().enumerate() {
        b.velocity = b.velocity.max(grid::norm_vector(&st.v));
        b.stress = b.stress.max(grid::norm_tensor(&st.s));
        b.phase_gradient = b.phase_gradient.max(grid::face_gradient_sq(&g, &st.phi.values).sqrt());
        let mut ent = 0.0;
        for &p in &st.phi.values {
            ent += potentials::entropy(mob, p)?;
            b.distance_to_box = b.distance_to_box.max(p.abs() - 1.0);
        }
        b.entropy = b.entropy.max(ent * g.cell_area());
        if k > 0 {
            b.chemical_gradient += h * grid::face_gradient_sq(&g, &st.mu.values);
            let lap = grid::face_operator(&g, &st.phi.values, None, None);
            b.laplacian += h * grid::dot(&g, &lap, &lap);
            b.multiplier += h * grid::dot(&g, &st.beta.values, &st.beta.values);
            let sing: f64 = st.phi.values.iter().map(|&p| traj.params.phase.singular_value(p)).sum();
            b.singular_energy += h * sing * g.cell_area();
        }
    }
    b.chemical_gradient = b.chemical_gradient.sqrt();
    b.laplacian = b.laplacian.sqrt();
    b.multiplier = b.multiplier.sqrt();
    b.distance_to_box = b.distance_to_box.max(0.0);
    Ok(b)
}

/// Both sides of the integration-by-parts rewriting of the Jaumann term,
/// `int S_ik d_j v_k T_ij = -int d_j S_ik v_k T_ij - int S_ik v_k d_j T_ij`,
/// summed over all index combinations with full 2x2 matrices.
pub fn jaumann_parts_residual(s: &TensorField, v: &VectorField, t: &TensorField) -> (f64, f64) {
    let g = &s.grid;
    let n = g.len();
    let full = |f: &TensorField, k: usize| [[f.xx[k], f.xy[k]], [f.xy[k], -f.xx[k]]];
    let gv = grid::velocity_gradient(v);
    let gs = ops::tensor_gradient(s);
    let gt = ops::tensor_gradient(t);
    // d_j of a full stress matrix entry (i, k) at cell c.
    let dmat = |gr: &ops::TensorGradient, i: usize, k: usize, j: usize, c: usize| -> f64 {
        match (i, k) {
            (0, 0) => gr.xx[j][c],
            (1, 1) => -gr.xx[j][c],
            _ => gr.xy[j][c],
        }
    };
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for c in 0..n {
        let sm = full(s, c);
        let tm = full(t, c);
        let vv = [v.x[c], v.y[c]];
        let dv = [[gv.xx[c], gv.xy[c]], [gv.yx[c], gv.yy[c]]];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    lhs += sm[i][k] * dv[k][j] * tm[i][j];
                    rhs -= dmat(&gs, i, k, j, c) * vv[k] * tm[i][j] + sm[i][k] * vv[k] * dmat(&gt, i, j, j, c);
                }
            }
        }
    }
    (lhs * g.cell_area(), rhs * g.cell_area())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_derivative_matches_difference() {
        let p = TimeProfile { a0: 0.7, a1: -0.2, a2: 0.3, omega: 5.0, horizon: 0.5 };
        for t in [0.0, 0.1, 0.27, 0.45] {
            let e = 1e-6;
            let fd = (p.value(t + e) - p.value(t - e)) / (2.0 * e);
            assert!((fd - p.derivative(t)).abs() < 1e-7, "{t}");
        }
        assert_eq!(p.value(0.5), 0.0);
    }

    #[test]
    fn sample_indices_cover_the_interval() {
        let idx = sample_indices(50, 10);
        assert_eq!(idx.len(), 10);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 50);
        assert_eq!(sample_pairs(&idx).len(), 45);
    }

    #[test]
    fn weight_formula() {
        let g = Grid::unit_square(8).unwrap();
        let mut s = TensorField::zeros(g, Boundary::Neumann);
        let w = RegularityWeight::Korn { korn: 2.0, nu_floor: 0.5 };
        assert_eq!(w.value(&s), 0.0);
        s.xx[5] = 1.0 / std::f64::consts::SQRT_2;
        assert!((w.value(&s) - 8.0).abs() < 1e-12);
    }
}
