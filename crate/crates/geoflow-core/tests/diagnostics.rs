use std::f64::consts::{SQRT_2, TAU};

use geoflow_core::diagnostics::{self, BumpComponent, RegularityWeight, TestTuple, TimeProfile, TupleSample};
use geoflow_core::grid::{Boundary, Grid, ScalarField, TensorField, VectorField};
use geoflow_core::materials::Materials;
use geoflow_core::potentials::{double_well, PhaseModel};
use geoflow_core::stepper::{self, Forcing, InitialData, ModelParams, PhaseInit, SimState, SolverSettings, StressInit, TimeGrid, Trajectory, VelocityInit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zero_v(g: Grid) -> VectorField {
    VectorField::zeros(g, Boundary::Dirichlet)
}

fn zero_s(g: Grid) -> TensorField {
    TensorField::zeros(g, Boundary::Neumann)
}

fn drop_run(steps: usize, forcing: Forcing) -> Trajectory {
    let g = Grid::unit_square(12).unwrap();
    let params = ModelParams::default();
    let init = InitialData {
        phase: PhaseInit::Drop { center: [0.5, 0.5], radius: 0.3, width: 0.06, amplitude: 0.9 },
        velocity: VelocityInit::Vortex { amplitude: 0.5, center: [0.5, 0.5], radius: 0.4 },
        stress: StressInit::Uniform { xx: 0.05, xy: -0.02 },
    };
    let init = stepper::initial_state(&g, &params, &init, 7).unwrap();
    stepper::run(&init, &params, &SolverSettings::default(), &TimeGrid::new(0.1, steps).unwrap(), &forcing).unwrap()
}

fn rest_run() -> Trajectory {
    let g = Grid::unit_square(10).unwrap();
    let params = ModelParams::default();
    let init = SimState::from_fields(0.0, ScalarField::constant(g, Boundary::Neumann, -0.2), zero_v(g), zero_s(g), &params).unwrap();
    stepper::run(&init, &params, &SolverSettings::default(), &TimeGrid::new(0.1, 5).unwrap(), &Forcing::None).unwrap()
}

fn sample_of(state: &SimState) -> TupleSample {
    let g = *state.grid();
    TupleSample {
        v: state.v.clone(),
        dv: zero_v(g),
        s: state.s.clone(),
        ds: zero_s(g),
        phi: state.phi.clone(),
        dphi: ScalarField::zeros(g, Boundary::Neumann),
        mu: state.mu.clone(),
    }
}

#[test]
fn total_energy_examples() {
    let g = Grid::unit_square(8).unwrap();
    let params = ModelParams { phase: PhaseModel::Obstacle, ..ModelParams::default() };
    let pure = SimState::from_fields(0.0, ScalarField::constant(g, Boundary::Neumann, 1.0), zero_v(g), zero_s(g), &params).unwrap();
    assert_eq!(diagnostics::total_energy(&pure, &params), 0.0);

    // Unit speed at density 2 carries kinetic energy equal to the area.
    let heavy = ModelParams { materials: Materials { rho_minus: 2.0, rho_plus: 2.0, ..Materials::default() }, ..params };
    let mut moving = pure.clone();
    moving.v.x = vec![1.0; g.len()];
    assert!((diagnostics::total_energy(&moving, &heavy) - 1.0).abs() < 1e-14);
}

#[test]
fn total_energy_matches_cell_sum() {
    let g = Grid::new(7, 5, 1.4, 0.9).unwrap();
    let params = ModelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut field = |lo: f64, hi: f64| (0..g.len()).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let phi = ScalarField::from_values(g, Boundary::Neumann, field(-1.0, 1.0)).unwrap();
    let v = VectorField::from_components(g, Boundary::Dirichlet, field(-1.0, 1.0), field(-1.0, 1.0)).unwrap();
    let s = TensorField::from_components(g, Boundary::Neumann, field(-0.3, 0.3), field(-0.3, 0.3)).unwrap();
    let state = SimState::from_fields(0.0, phi, v, s, &params).unwrap();

    let (dx, dy) = (g.dx(), g.dy());
    let u = |i: usize, j: usize| state.phi.values[g.idx(i, j)];
    let mut oracle = 0.0;
    for k in 0..g.len() {
        let p = state.phi.values[k];
        let rho = params.materials.density(p);
        oracle += 0.5 * rho * (state.v.x[k].powi(2) + state.v.y[k].powi(2));
        oracle += state.s.xx[k].powi(2) + state.s.xy[k].powi(2);
        oracle += double_well::value(p) + params.phase.singular_value(p);
    }
    oracle *= dx * dy;
    // Neumann boundary: only interior faces carry a jump.
    for j in 0..g.ny {
        for i in 0..g.nx - 1 {
            oracle += 0.5 * ((u(i + 1, j) - u(i, j)) / dx).powi(2) * dx * dy;
        }
    }
    for j in 0..g.ny - 1 {
        for i in 0..g.nx {
            oracle += 0.5 * ((u(i, j + 1) - u(i, j)) / dy).powi(2) * dx * dy;
        }
    }
    let e = diagnostics::total_energy(&state, &params);
    assert!((e - oracle).abs() <= 1e-12 * oracle, "{e} vs {oracle}");
}

#[test]
fn regularity_weight_examples() {
    let g = Grid::unit_square(4).unwrap();
    let mut s = zero_s(g);
    assert_eq!(RegularityWeight::Korn { korn: 2.0, nu_floor: 0.5 }.value(&s), 0.0);
    // Unit Frobenius norm in one cell.
    s.xx[5] = 0.6 / SQRT_2;
    s.xy[5] = 0.8 / SQRT_2;
    assert!((RegularityWeight::Korn { korn: 2.0, nu_floor: 0.5 }.value(&s) - 8.0).abs() < 1e-14);
    assert_eq!(RegularityWeight::Zero.value(&s), 0.0);

    let params = ModelParams::default();
    assert!(matches!(RegularityWeight::for_model(&params, 3.0), RegularityWeight::Korn { korn, .. } if korn == 3.0));
    let diffusive = ModelParams { materials: Materials { stress_diffusion: 0.1, ..Materials::default() }, ..params };
    assert_eq!(RegularityWeight::for_model(&diffusive, 3.0), RegularityWeight::Zero);
}

#[test]
fn korn_estimate_bounds_random_solenoidal_fields() {
    let g = Grid::unit_square(10).unwrap();
    let est = diagnostics::estimate_korn(&g, 1).unwrap();
    assert!(est.raw >= 1.0 && est.constant >= est.raw);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let psi = ScalarField::from_values(g, Boundary::Dirichlet, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let v = VectorField::curl_of(&psi);
        let ratio = diagnostics::h1_norm_sq(&v) / diagnostics::sym_norm_sq(&v);
        assert!(ratio <= est.raw * (1.0 + 1e-6), "{ratio} > {}", est.raw);
    }
    // The zeroth-order part shrinks relative to the gradient on a smaller box.
    let small = diagnostics::estimate_korn(&Grid::new(10, 10, 0.5, 0.5).unwrap(), 1).unwrap();
    assert!(small.raw < est.raw, "{} vs {}", small.raw, est.raw);
}

#[test]
fn evs_slack_is_zero_on_empty_intervals_and_nonnegative_for_the_zero_tuple() {
    let traj = drop_run(8, Forcing::None);
    let led = diagnostics::evs_ledger(&traj, &TestTuple::zero(), &RegularityWeight::Zero).unwrap();
    assert_eq!(led.steps(), 8);
    for a in 0..=8 {
        assert_eq!(led.slack(a, a), 0.0);
        for b in a + 1..=8 {
            let e = led.energy[a];
            assert!(led.slack(a, b) >= -1e-8 * (1.0 + e.abs()), "[{a},{b}] {:e}", led.slack(a, b));
        }
    }
}

#[test]
fn tuple_admissibility() {
    let g = Grid::unit_square(12).unwrap();
    let params = ModelParams::default();
    for tt in diagnostics::make_battery(10, 0.3, &g, 0.1, 5) {
        assert!(diagnostics::check_tuple(&tt, &g, &params).is_ok(), "{}", tt.id);
        let sp = tt.spatial(&g);
        assert!(geoflow_core::grid::divergence(&sp.v).max_abs() <= 1e-10);
        // Profiles vanish from the horizon on.
        let late = sp.sample(0.1);
        assert!(late.v.max_norm() == 0.0 && late.s.max_norm() == 0.0 && late.phi.values.iter().all(|v| *v == 0.0));
    }
    let profile = TimeProfile { a0: 1.0, a1: 0.0, a2: 0.0, omega: 1.0, horizon: 1.0 };
    let too_big = TestTuple { phase: Some(BumpComponent { center: [0.5, 0.5], radius: 0.3, amplitude: 2.0, profile }), ..TestTuple::zero() };
    assert!(diagnostics::check_tuple(&too_big, &g, &params).is_err());
}

#[test]
fn time_profile_derivative_matches_differences() {
    let p = TimeProfile { a0: 0.7, a1: -0.3, a2: 0.4, omega: 5.0, horizon: 2.0 };
    let h = 1e-6;
    for i in 0..19 {
        let t = 0.1 * i as f64;
        let fd = (p.value(t + h) - p.value(t - h)) / (2.0 * h);
        assert!((fd - p.derivative(t)).abs() < 1e-7, "t = {t}");
    }
    assert_eq!(p.value(2.5), 0.0);
    assert_eq!(p.derivative(2.5), 0.0);
}

#[test]
fn relative_energy_of_a_state_to_itself_vanishes() {
    let traj = drop_run(3, Forcing::None);
    for st in &traj.states {
        let rel = diagnostics::relative_energy(st, &sample_of(st), &traj.params);
        assert!(rel.total.abs() < 1e-14, "{rel:?}");
    }
    let st = &traj.states[3];
    let mut other = sample_of(st);
    other.v.x.iter_mut().for_each(|v| *v += 0.1);
    assert!(diagnostics::relative_energy(st, &other, &traj.params).kinetic > 0.0);
}

#[test]
fn weak_phase_residual_with_constant_test_vanishes() {
    let traj = drop_run(6, Forcing::Vortex { amplitude: 1.0, center: [0.5, 0.5], radius: 0.3, frequency: 2.0 });
    let one = ScalarField::constant(traj.grid, Boundary::Neumann, 1.0);
    for a in 0..6 {
        assert!(diagnostics::check_weak_ch_field(&traj, &one, a, 6).abs() <= 1e-10);
    }
    // A nonconstant test is satisfied up to the solver tolerance as well.
    let zeta = ScalarField::from_fn(traj.grid, Boundary::Neumann, |x, y| (TAU * x).cos() + y * y);
    assert!(diagnostics::check_weak_ch_field(&traj, &zeta, 0, 6).abs() <= 1e-8);
}

#[test]
fn gibbs_thomson_relation_holds_after_splitting() {
    for row in diagnostics::check_gibbs_thomson(&rest_run()) {
        assert!(row.raw <= 1e-12 && row.splitting <= 1e-14, "{row:?}");
    }
    for row in diagnostics::check_gibbs_thomson(&drop_run(5, Forcing::None)) {
        assert!(row.corrected <= 1e-8, "{row:?}");
        assert!(row.splitting > 0.0);
    }
}

#[test]
fn auxiliary_energy_examples() {
    let rest = diagnostics::auxiliary_energy(&rest_run(), 1.0).unwrap();
    let e0 = rest.rows[0].aux;
    assert!(rest.rows.iter().all(|r| (r.aux - e0).abs() <= 1e-12 * (1.0 + e0)));
    assert_eq!(rest.majorisation_gap, 0.0);

    let free = diagnostics::auxiliary_energy(&drop_run(8, Forcing::None), 1.0).unwrap();
    assert!(free.aux_increase <= 1e-8 * (1.0 + free.rows[0].aux), "{:e}", free.aux_increase);
    assert!(free.monotone(1e-8));
    assert!(free.rows.iter().all(|r| r.forcing_budget == 0.0));

    let forced = diagnostics::auxiliary_energy(&drop_run(8, Forcing::Vortex { amplitude: 1.0, center: [0.5, 0.5], radius: 0.3, frequency: 2.0 }), 1.0).unwrap();
    assert!(forced.rows.windows(2).all(|w| w[1].forcing_budget > w[0].forcing_budget));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn korn_weight_is_quadratic_in_the_stress(korn in 0.5f64..5.0, nu in 0.1f64..3.0, c in -4.0f64..4.0, norm in 0.0f64..2.0, th in 0.0f64..TAU) {
        let g = Grid::unit_square(4).unwrap();
        let mut s = zero_s(g);
        s.xx[3] = norm * th.cos() / SQRT_2;
        s.xy[3] = norm * th.sin() / SQRT_2;
        let scaled = TensorField { xx: s.xx.iter().map(|v| c * v).collect(), xy: s.xy.iter().map(|v| c * v).collect(), ..s.clone() };
        let w = RegularityWeight::Korn { korn, nu_floor: nu };
        let (a, b) = (w.value(&s), w.value(&scaled));
        prop_assert!((b - c * c * a).abs() <= 1e-12 * (1.0 + b));
        prop_assert!((a - korn * korn / nu * norm * norm).abs() <= 1e-12 * (1.0 + a));
    }
}
