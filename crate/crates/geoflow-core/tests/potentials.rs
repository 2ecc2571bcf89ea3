use std::f64::consts::{LN_2, PI};

use geoflow_core::grid::{Boundary, Grid, ScalarField};
use geoflow_core::materials::Coefficient;
use geoflow_core::potentials::{self, double_well, PhaseModel, PotentialError};
use proptest::prelude::*;

fn central(f: impl Fn(f64) -> f64, s: f64, h: f64) -> f64 {
    (f(s + h) - f(s - h)) / (2.0 * h)
}

#[test]
fn double_well_values() {
    assert_eq!(double_well::value(1.0), 0.0);
    assert_eq!(double_well::value(-1.0), 0.0);
    assert_eq!(double_well::value(0.0), 0.25);
    for i in 0..=400 {
        let s = -2.0 + 0.01 * i as f64;
        if (s.abs() - 1.0).abs() > 1e-9 {
            assert!(double_well::value(s) > 0.0, "s = {s}");
        }
    }
}

#[test]
fn double_well_derivatives_match_differences() {
    for i in 0..=200 {
        let s = -1.5 + 0.015 * i as f64;
        assert!((double_well::d1(s) - central(double_well::value, s, 1e-5)).abs() <= 1e-6, "d1 at {s}");
        assert!((double_well::d2(s) - central(double_well::d1, s, 1e-5)).abs() <= 1e-6, "d2 at {s}");
        // The splitting constant convexifies the well.
        assert!(double_well::d2(s) + double_well::CONVEXITY_DEFECT >= -1e-15);
    }
}

#[test]
fn logarithmic_value_at_origin() {
    assert!((potentials::log_value(1.0, 0.0) - 4.0 * LN_2).abs() < 1e-14);
    assert!((potentials::log_value(1.0, 0.0) - 2.772589).abs() < 1e-6);
    for alpha in [1.0, 0.1, 1e-3] {
        assert_eq!(potentials::log_d1(alpha, 0.0), 0.0);
    }
}

#[test]
fn logarithmic_endpoint_matches_the_limit() {
    for alpha in [1.0f64, 0.3, 0.1, 1e-2, 1e-4] {
        let reach = 1.0 + alpha;
        let closed = 2.0 * alpha * reach * (2.0 * reach).ln();
        let near = potentials::log_value(alpha, reach * (1.0 - 1e-12));
        let at = potentials::log_value(alpha, reach);
        assert!((at - closed).abs() <= 1e-12 * closed, "alpha {alpha}: {at} vs {closed}");
        assert!((near - closed).abs() <= 1e-9 * closed, "alpha {alpha}: limit {near} vs {closed}");
        assert!((potentials::log_value(alpha, -reach) - closed).abs() <= 1e-12 * closed);
        assert_eq!(potentials::log_value(alpha, reach * (1.0 + 1e-9)), f64::INFINITY);
        assert_eq!(potentials::log_value(alpha, -reach - 1e-6), f64::INFINITY);
    }
}

#[test]
fn logarithmic_derivatives_match_differences() {
    for alpha in [0.5, 0.1, 0.01] {
        for i in 1..200 {
            let s = (1.0 + alpha) * (-0.95 + 0.0095 * i as f64);
            let h = 1e-6;
            let f = |x| potentials::log_value(alpha, x);
            let d1 = |x| potentials::log_d1(alpha, x);
            let d2 = |x| potentials::log_d2(alpha, x);
            let scale = 1.0 + potentials::log_d2(alpha, s).abs();
            assert!((potentials::log_d1(alpha, s) - central(f, s, h)).abs() <= 1e-6 * scale, "d1 {alpha} {s}");
            assert!((potentials::log_d2(alpha, s) - central(d1, s, h)).abs() <= 1e-6 * scale, "d2 {alpha} {s}");
            let s3 = 1.0 + potentials::log_d3(alpha, s).abs();
            assert!((potentials::log_d3(alpha, s) - central(d2, s, h)).abs() <= 1e-5 * s3, "d3 {alpha} {s}");
        }
    }
}

#[test]
fn obstacle_projection_examples() {
    assert_eq!(potentials::obstacle_project(1.3), 1.0);
    assert_eq!(potentials::obstacle_project(-0.4), -0.4);
    assert_eq!(potentials::obstacle_project(-7.0), -1.0);
}

#[test]
fn beta_selection_examples() {
    let log = PhaseModel::Logarithmic { alpha: 0.1 };
    assert!(potentials::select_beta(&log, &[0.0; 9], None, 0.0).unwrap().iter().all(|b| *b == 0.0));
    match potentials::select_beta(&log, &[0.2, 1.2, -0.3], None, 0.0) {
        Err(PotentialError::OutsideDomain { value, .. }) => assert_eq!(value, 1.2),
        other => panic!("expected a domain error, got {other:?}"),
    }

    let obs = PhaseModel::Obstacle;
    let inside = [0.3, -0.9, 0.99];
    assert!(potentials::select_beta(&obs, &inside, Some(&[0.0; 3]), 1e-12).unwrap().iter().all(|b| *b == 0.0));
    assert!(matches!(potentials::select_beta(&obs, &inside, None, 1e-12), Err(PotentialError::MissingMultiplier)));
    // At the upper obstacle only nonnegative multipliers are certified.
    let phi = [1.0, 0.5, -1.0];
    assert!(potentials::select_beta(&obs, &phi, Some(&[0.7, 0.0, -0.2]), 1e-12).is_ok());
    assert!(matches!(potentials::select_beta(&obs, &phi, Some(&[-0.7, 0.0, -0.2]), 1e-12), Err(PotentialError::Complementarity(_))));
    assert!(matches!(potentials::select_beta(&obs, &phi, Some(&[0.7, 0.1, -0.2]), 1e-12), Err(PotentialError::Complementarity(_))));
}

#[test]
fn entropy_constant_mobility() {
    let m = Coefficient::Constant(1.0);
    assert_eq!(potentials::entropy(&m, 1.0).unwrap(), 0.5);
    assert_eq!(potentials::entropy(&m, 0.0).unwrap(), 0.0);
    let slope = (potentials::entropy(&m, 1e-6).unwrap() - potentials::entropy(&m, -1e-6).unwrap()) / 2e-6;
    assert!(slope.abs() < 1e-12);
    assert!(potentials::entropy(&m, f64::NAN).is_err());
}

/// `int_0^s (s - q) / (a + b q) dq` in closed form.
fn affine_entropy_closed(a: f64, b: f64, s: f64) -> f64 {
    if b == 0.0 {
        return 0.5 * s * s / a;
    }
    (s + a / b) / b * ((a + b * s) / a).ln() - s / b
}

/// Composite Simpson with `n` panels.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn entropy_affine_mobility_matches_oracles() {
    for (minus, plus) in [(1.0, 3.0), (2.0, 0.5), (0.2, 0.25)] {
        let m = Coefficient::Affine { minus, plus };
        let (a, b) = (0.5 * (minus + plus), 0.5 * (plus - minus));
        for i in 0..=40 {
            let s = -1.0 + 0.05 * i as f64;
            let got = potentials::entropy(&m, s).unwrap();
            assert!((got - affine_entropy_closed(a, b, s)).abs() <= 1e-8, "({minus}, {plus}) at {s}");
        }
        // Beyond the pure phases the mobility is frozen at its endpoint value.
        for s in [1.4, -1.7] {
            let oracle = simpson(|q| (s - q) / m.value(q), 0.0, s, 20_000);
            assert!((potentials::entropy(&m, s).unwrap() - oracle).abs() <= 1e-8, "({minus}, {plus}) at {s}");
        }
    }
}

#[test]
fn recovery_bound_values() {
    assert!((potentials::mosco_recovery_bound(0.1) - 0.13278).abs() < 1e-5);
    assert!((potentials::mosco_recovery_bound(1.0) - 3.0 * 3f64.ln()).abs() < 1e-13);
    assert!((potentials::mosco_recovery_bound(1.0) - 3.2958).abs() < 1e-4);
    let alphas = [1e-1, 1e-2, 1e-3, 1e-4];
    let b: Vec<f64> = alphas.iter().map(|&a| potentials::mosco_recovery_bound(a)).collect();
    assert!(b.windows(2).all(|w| w[1] < w[0]), "{b:?}");
    assert!(b[3] < 1e-3);
    // The bound is the potential at the pure phases.
    for a in alphas {
        assert!((potentials::mosco_recovery_bound(a) - potentials::log_value(a, 1.0)).abs() < 1e-14);
    }
}

#[test]
fn liminf_probe_examples() {
    let g = Grid::new(6, 5, 2.0, 1.5).unwrap();
    let area = g.lx * g.ly;
    for alpha in [0.1, 0.01, 1e-3] {
        let edge = ScalarField::constant(g, Boundary::Neumann, 1.0 + alpha);
        let row = potentials::mosco_liminf_probe(alpha, &[&edge], 0.1);
        assert!((row.distance_to_box - alpha).abs() <= 4.0 * f64::EPSILON, "{}", row.distance_to_box);
    }
    let zero = ScalarField::zeros(g, Boundary::Neumann);
    let window = [&zero, &zero, &zero, &zero];
    let dt = 0.125;
    let mut prev = f64::INFINITY;
    for alpha in [1e-1, 1e-2, 1e-3, 1e-4] {
        let row = potentials::mosco_liminf_probe(alpha, &window, dt);
        let closed = area * (window.len() as f64 * dt) * potentials::log_value(alpha, 0.0);
        assert!((row.singular_energy - closed).abs() <= 1e-12 * closed);
        assert_eq!(row.distance_to_box, 0.0);
        assert!(row.singular_energy < prev);
        prev = row.singular_energy;
    }
    assert!(prev < 1e-2);
    let outside = ScalarField::constant(g, Boundary::Neumann, 1.2);
    for alpha in [0.19, 0.1, 1e-3] {
        assert_eq!(potentials::mosco_liminf_probe(alpha, &[&outside], 0.1).singular_energy, f64::INFINITY);
    }
}

fn wavy_phase() -> ScalarField {
    let g = Grid::unit_square(32).unwrap();
    ScalarField::from_fn(g, Boundary::Neumann, |x, y| (PI * x).cos() * (PI * y).cos().abs().sqrt())
}

#[test]
fn scaled_test_phase_stays_inside() {
    let phi = wavy_phase();
    for (alpha, theta) in [(0.1, 0.4), (1e-3, 0.25), (1e-4, 0.45)] {
        let scaled = potentials::scale_test_phase(&phi, alpha, theta);
        let cap = 1.0 - f64::powf(alpha, theta);
        assert!(scaled.values.iter().all(|v| v.abs() <= cap + 1e-15));
    }
}

#[test]
fn derivative_bounds_admissible_exponent() {
    let rep = potentials::derivative_bound_report(&wavy_phase(), &[1e-1, 1e-2, 1e-3, 1e-4], 0.4);
    assert!(rep.majorised && rep.majorants_decrease && rep.suprema_decrease, "{rep:?}");
    let last = rep.rows.last().unwrap();
    // The third derivative only decays like alpha^(1 - 2 theta).
    assert!(last.sup_d1 < 1e-2 && last.sup_d2 < 1e-2 && last.sup_d3 < 0.5 * rep.rows[0].sup_d3, "{rep:?}");
}

#[test]
fn derivative_bounds_control_exponent_diverges() {
    let rep = potentials::derivative_bound_report(&wavy_phase(), &[1e-1, 1e-2, 1e-3, 1e-4], 0.6);
    assert!(!rep.majorants_decrease);
    let d3: Vec<f64> = rep.rows.iter().map(|r| r.majorant_d3).collect();
    assert!(d3.windows(2).all(|w| w[1] > w[0]), "{d3:?}");
    // Asymptotically the majorant behaves like alpha^(1 - 2 theta); at
    // alpha = 1e-4 the correction from alpha itself is still a few percent.
    let tail = d3[3] / d3[2];
    assert!((tail / 10f64.powf(0.2) - 1.0).abs() < 0.1, "{tail}");
    assert!(!rep.suprema_decrease);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn logarithmic_family_is_convex_and_nonnegative(alpha in 1e-4f64..1.0, t in -0.999999f64..0.999999, u in -1.0f64..1.0) {
        let s = (1.0 + alpha) * t;
        prop_assert!(potentials::log_d2(alpha, s) >= 0.0);
        prop_assert!(potentials::log_value(alpha, s) >= 0.0);
        let r = (1.0 + alpha) * u;
        let mid = potentials::log_value(alpha, 0.5 * (s + r));
        let avg = 0.5 * (potentials::log_value(alpha, s) + potentials::log_value(alpha, r));
        prop_assert!(mid <= avg + 1e-14 * (1.0 + avg));
    }

    #[test]
    fn slope_inverse_recovers_phase(alpha in 1e-3f64..1.0, t in -0.99f64..0.99) {
        let s = (1.0 + alpha) * t;
        let back = potentials::log_d1_inverse(alpha, potentials::log_d1(alpha, s));
        prop_assert!((back - s).abs() <= 1e-12 * (1.0 + alpha) / (1.0 - t.abs()));
    }

    #[test]
    fn obstacle_projection_is_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(potentials::obstacle_project(lo) <= potentials::obstacle_project(hi));
        prop_assert!(potentials::obstacle_project(a).abs() <= 1.0);
    }

    #[test]
    fn certified_obstacle_multiplier_is_a_normal_cone_element(
        side in 0u8..3, beta in -2.0f64..2.0, interior in -0.999f64..0.999, probe in -1.0f64..=1.0,
    ) {
        let phi = match side { 0 => -1.0, 1 => 1.0, _ => interior };
        if let Ok(sel) = potentials::select_beta(&PhaseModel::Obstacle, &[phi], Some(&[beta]), 1e-12) {
            prop_assert!(sel[0] * (probe - phi) <= 1e-12);
        }
    }

    #[test]
    fn recovery_bound_decreases_towards_zero(a in 1e-6f64..0.5, f in 0.01f64..0.99) {
        let b = a * f;
        prop_assert!(potentials::mosco_recovery_bound(b) < potentials::mosco_recovery_bound(a));
        prop_assert!(potentials::mosco_recovery_bound(b) > 0.0);
    }
}
