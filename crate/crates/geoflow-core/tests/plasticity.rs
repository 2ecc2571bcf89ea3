use std::f64::consts::{PI, SQRT_2, TAU};

use geoflow_core::grid::{Boundary, Grid, ScalarField, TensorField};
use geoflow_core::materials::Coefficient;
use geoflow_core::plasticity::{self, frob, PlasticPotential};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(xx, xy)` storage of a trace-free tensor with the given Frobenius
/// norm and direction.
fn tensor(norm: f64, angle: f64) -> [f64; 2] {
    [norm * angle.cos() / SQRT_2, norm * angle.sin() / SQRT_2]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    frob([a[0] - b[0], a[1] - b[1]])
}

fn objective(a: f64, r: [f64; 2], tau: f64, s: [f64; 2]) -> f64 {
    0.5 * dist(s, r).powi(2) + tau * 0.5 * a * frob(s).powi(2)
}

/// Brute-force minimiser over a polar lattice of the yield ball in
/// Frobenius coordinates: radii `k * res`, the yield circle included, and
/// an angular step of at most `res` along the circle.
fn grid_search(a: f64, yield_stress: f64, r: [f64; 2], tau: f64, res: f64) -> [f64; 2] {
    let radii = (yield_stress / res).ceil() as usize;
    let angles = (TAU * yield_stress / res).ceil() as usize;
    let mut best = ([0.0, 0.0], objective(a, r, tau, [0.0, 0.0]));
    for i in 1..=radii {
        let rho = yield_stress * i as f64 / radii as f64;
        for j in 0..angles {
            let s = tensor(rho, TAU * j as f64 / angles as f64);
            let f = objective(a, r, tau, s);
            if f < best.1 {
                best = (s, f);
            }
        }
    }
    best.0
}

#[test]
fn density_examples() {
    assert_eq!(PlasticPotential::density_with(1.0, 1.0, [0.0, 0.0]), 0.0);
    assert!((PlasticPotential::density_with(1.0, 1.0, tensor(1.0, 0.3)) - 0.5).abs() < 1e-15);
    assert_eq!(PlasticPotential::density_with(1.0, 1.0, tensor(1.01, 0.3)), f64::INFINITY);
}

#[test]
fn functional_examples() {
    let g = Grid::unit_square(8).unwrap();
    let p = PlasticPotential { modulus: Coefficient::Constant(1.0), yield_stress: 1.0 };
    let phi = ScalarField::zeros(g, Boundary::Neumann);
    assert_eq!(p.functional(&phi, &TensorField::zeros(g, Boundary::Neumann)), 0.0);
    let c = tensor(0.6, 1.1);
    let s = TensorField { grid: g, bc: Boundary::Neumann, xx: vec![c[0]; g.len()], xy: vec![c[1]; g.len()] };
    assert!((p.functional(&phi, &s) - 0.18).abs() < 1e-14);
}

#[test]
fn functional_matches_cell_sum() {
    let g = Grid::new(9, 6, 1.5, 0.8).unwrap();
    let p = PlasticPotential { modulus: Coefficient::Affine { minus: 0.5, plus: 2.0 }, yield_stress: 0.7 };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let phi = ScalarField::from_fn(g, Boundary::Neumann, |x, y| (PI * x).sin() * y.cos());
    let mut s = TensorField::zeros(g, Boundary::Neumann);
    for k in 0..g.len() {
        let v = tensor(rng.random_range(0.0..0.7), rng.random_range(0.0..TAU));
        s.xx[k] = v[0];
        s.xy[k] = v[1];
    }
    let mut brute = 0.0;
    for k in 0..g.len() {
        let a = 1.25 + 0.75 * phi.values[k].clamp(-1.0, 1.0);
        brute += 0.5 * a * 2.0 * (s.xx[k].powi(2) + s.xy[k].powi(2)) * g.dx() * g.dy();
    }
    assert!((p.functional(&phi, &s) - brute).abs() <= 1e-14 * brute.max(1.0));
}

#[test]
fn prox_examples_against_grid_search() {
    let (a, sy, tau, res) = (1.0, 1.0, 0.1, 1e-3);
    assert_eq!(PlasticPotential::prox_with(a, sy, [0.0, 0.0], tau), [0.0, 0.0]);

    let r = tensor(0.55, 0.7);
    let out = PlasticPotential::prox_with(a, sy, r, tau);
    assert!((frob(out) - 0.5).abs() < 1e-14);
    assert!(dist(out, [r[0] / 1.1, r[1] / 1.1]) < 1e-14);
    assert!(dist(out, grid_search(a, sy, r, tau, res)) <= 2e-3);

    let r = tensor(5.0, -2.0);
    let out = PlasticPotential::prox_with(a, sy, r, tau);
    assert!(dist(out, [r[0] / 5.0, r[1] / 5.0]) < 1e-14);
    assert!(dist(out, grid_search(a, sy, r, tau, res)) <= 2e-3);
}

#[test]
fn field_prox_is_pointwise() {
    let g = Grid::unit_square(6).unwrap();
    let p = PlasticPotential { modulus: Coefficient::Affine { minus: 1.0, plus: 3.0 }, yield_stress: 0.8 };
    let phi = ScalarField::from_fn(g, Boundary::Neumann, |x, _| 2.0 * x - 1.0);
    let r = TensorField::from_components(g, Boundary::Neumann, (0..g.len()).map(|k| 0.05 * k as f64).collect(), vec![0.3; g.len()]).unwrap();
    let out = p.prox(&phi, &r, 0.2);
    for k in 0..g.len() {
        let want = PlasticPotential::prox_with(p.modulus.value(phi.values[k]), 0.8, [r.xx[k], r.xy[k]], 0.2);
        assert_eq!([out.xx[k], out.xy[k]], want);
    }
}

#[test]
fn smooth_region_subgradient_is_the_gradient() {
    let (a, tau) = (2.0, 0.25);
    let r = tensor(0.3, 0.4);
    let s = PlasticPotential::prox_with(a, 1.0, r, tau);
    let xi = [(r[0] - s[0]) / tau, (r[1] - s[1]) / tau];
    assert!(dist(xi, [a * s[0], a * s[1]]) < 1e-14);
    assert_eq!(PlasticPotential::prox_with(a, 1.0, [0.0, 0.0], tau), [0.0, 0.0]);
}

#[test]
fn boundary_subgradient_satisfies_the_subgradient_inequality() {
    let (a, sy, tau) = (1.0, 1.0, 0.1);
    let r = tensor(3.0, 2.2);
    let s = PlasticPotential::prox_with(a, sy, r, tau);
    assert!((frob(s) - sy).abs() < 1e-14);
    let xi = [(r[0] - s[0]) / tau, (r[1] - s[1]) / tau];
    // Nonnegative radial excess beyond a S.
    let excess = [xi[0] - a * s[0], xi[1] - a * s[1]];
    assert!(2.0 * (excess[0] * s[0] + excess[1] * s[1]) >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ps = PlasticPotential::density_with(a, sy, s);
    for _ in 0..1000 {
        let t = tensor(sy * rng.random::<f64>().sqrt(), rng.random_range(0.0..TAU));
        let rhs = ps + 2.0 * (xi[0] * (t[0] - s[0]) + xi[1] * (t[1] - s[1]));
        assert!(PlasticPotential::density_with(a, sy, t) >= rhs - 1e-12);
    }
}

fn arb_tensor(max: f64) -> impl Strategy<Value = [f64; 2]> {
    (0.0..max, 0.0..TAU).prop_map(|(n, th)| tensor(n, th))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn prox_is_nonexpansive(a in 0.1f64..5.0, sy in 0.1f64..3.0, tau in 1e-3f64..2.0, r1 in arb_tensor(6.0), r2 in arb_tensor(6.0)) {
        let p1 = PlasticPotential::prox_with(a, sy, r1, tau);
        let p2 = PlasticPotential::prox_with(a, sy, r2, tau);
        prop_assert!(dist(p1, p2) <= dist(r1, r2) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn prox_beats_random_competitors(a in 0.1f64..5.0, sy in 0.1f64..3.0, tau in 1e-3f64..2.0, r in arb_tensor(6.0), seed in any::<u64>()) {
        let s = PlasticPotential::prox_with(a, sy, r, tau);
        prop_assert!(frob(s) <= sy * (1.0 + 1e-14));
        let best = objective(a, r, tau, s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let t = tensor(sy * rng.random::<f64>().sqrt(), rng.random_range(0.0..TAU));
            prop_assert!(best <= objective(a, r, tau, t) + 1e-13);
        }
    }

    #[test]
    fn prox_residual_is_a_certified_subgradient(a in 0.1f64..5.0, sy in 0.1f64..3.0, tau in 1e-3f64..2.0, r in arb_tensor(6.0)) {
        let s = PlasticPotential::prox_with(a, sy, r, tau);
        let xi = [(r[0] - s[0]) / tau, (r[1] - s[1]) / tau];
        let d = PlasticPotential::subdifferential_distance_with(a, sy, s, xi);
        prop_assert!(d <= 1e-10 * (1.0 + frob(xi)), "distance {d:e}");
        // The plastic pairing dominates the potential, which is nonnegative.
        let pairing = 2.0 * (xi[0] * s[0] + xi[1] * s[1]);
        let ps = PlasticPotential::density_with(a, sy, s);
        prop_assert!(ps >= 0.0);
        prop_assert!(pairing >= ps - 1e-12 * (1.0 + pairing.abs()));
    }

    #[test]
    fn density_is_midpoint_convex_and_vanishes_at_zero(a in 0.1f64..5.0, sy in 0.1f64..3.0, s in arb_tensor(3.0), t in arb_tensor(3.0)) {
        prop_assert_eq!(PlasticPotential::density_with(a, sy, [0.0, 0.0]), 0.0);
        let mid = [0.5 * (s[0] + t[0]), 0.5 * (s[1] + t[1])];
        let lhs = PlasticPotential::density_with(a, sy, mid);
        let rhs = 0.5 * (PlasticPotential::density_with(a, sy, s) + PlasticPotential::density_with(a, sy, t));
        prop_assert!(lhs <= rhs + 1e-14 * (1.0 + rhs.abs()) || rhs.is_infinite());
    }

    #[test]
    fn field_residual_matches_pointwise_formula(tau in 1e-3f64..1.0, seed in any::<u64>()) {
        let g = Grid::unit_square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = TensorField::from_components(
            g,
            Boundary::Neumann,
            (0..g.len()).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..g.len()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        ).unwrap();
        let phi = ScalarField::zeros(g, Boundary::Neumann);
        let p = PlasticPotential { modulus: Coefficient::Constant(1.5), yield_stress: 1.0 };
        let s = p.prox(&phi, &r, tau);
        let xi = plasticity::subgradient_residual(&r, &s, tau);
        prop_assert!(p.subdifferential_residual(&phi, &s, &xi) <= 1e-10 * (1.0 + xi.max_norm()));
    }
}
