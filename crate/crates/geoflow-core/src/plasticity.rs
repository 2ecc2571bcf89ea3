//! Convex plastic potential `a(phi)/2 |S|^2` on the yield ball, its
//! proximal map and subgradients. Tensors are symmetric trace-free and
//! stored as `(xx, xy)`; norms are Frobenius.

use serde::{Deserialize, Serialize};

use crate::grid::{ScalarField, TensorField};
use crate::materials::Coefficient;

/// Relative slack when deciding whether a stress sits on the yield surface.
pub const YIELD_SLACK: f64 = 1e-12;

#[inline]
pub fn frob(s: [f64; 2]) -> f64 {
    (2.0 * (s[0] * s[0] + s[1] * s[1])).sqrt()
}

#[inline]
fn frob_dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    2.0 * (a[0] * b[0] + a[1] * b[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlasticPotential {
    pub modulus: Coefficient,
    pub yield_stress: f64,
}

impl PlasticPotential {
    /// Pointwise density for a given modulus value.
    #[inline]
    pub fn density_with(a: f64, yield_stress: f64, s: [f64; 2]) -> f64 {
        let n = frob(s);
        if n <= yield_stress * (1.0 + YIELD_SLACK) {
            0.5 * a * n * n
        } else {
            f64::INFINITY
        }
    }

    pub fn density(&self, phi: f64, s: [f64; 2]) -> f64 {
        Self::density_with(self.modulus.value(phi), self.yield_stress, s)
    }

    /// Integral of the density; `+inf` if the yield bound is violated anywhere.
    pub fn functional(&self, phi: &ScalarField, s: &TensorField) -> f64 {
        let area = s.grid.cell_area();
        (0..s.grid.len()).map(|k| self.density(phi.values[k], [s.xx[k], s.xy[k]])).sum::<f64>() * area
    }

    /// Minimiser of `|S - R|^2 / 2 + tau P(S)`: the shrunk input projected
    /// onto the yield ball.
    #[inline]
    pub fn prox_with(a: f64, yield_stress: f64, r: [f64; 2], tau: f64) -> [f64; 2] {
        let f = 1.0 / (1.0 + tau * a);
        let z = [r[0] * f, r[1] * f];
        let n = frob(z);
        if n > yield_stress {
            let g = yield_stress / n;
            [z[0] * g, z[1] * g]
        } else {
            z
        }
    }

    pub fn prox(&self, phi: &ScalarField, r: &TensorField, tau: f64) -> TensorField {
        let mut out = TensorField::zeros(r.grid, r.bc);
        for k in 0..r.grid.len() {
            let z = Self::prox_with(self.modulus.value(phi.values[k]), self.yield_stress, [r.xx[k], r.xy[k]], tau);
            out.xx[k] = z[0];
            out.xy[k] = z[1];
        }
        out
    }

    /// Frobenius distance from `xi` to the subdifferential at `s`.
    pub fn subdifferential_distance_with(a: f64, yield_stress: f64, s: [f64; 2], xi: [f64; 2]) -> f64 {
        let d = [xi[0] - a * s[0], xi[1] - a * s[1]];
        let n = frob(s);
        if n < yield_stress * (1.0 - YIELD_SLACK) {
            return frob(d);
        }
        if n > yield_stress * (1.0 + YIELD_SLACK) {
            return f64::INFINITY;
        }
        let u = [s[0] / n, s[1] / n];
        let lam = frob_dot(d, u).max(0.0);
        frob([d[0] - lam * u[0], d[1] - lam * u[1]])
    }

    /// Largest pointwise distance of `xi` from the subdifferential at `s`.
    pub fn subdifferential_residual(&self, phi: &ScalarField, s: &TensorField, xi: &TensorField) -> f64 {
        (0..s.grid.len()).fold(0.0f64, |m, k| {
            m.max(Self::subdifferential_distance_with(
                self.modulus.value(phi.values[k]),
                self.yield_stress,
                [s.xx[k], s.xy[k]],
                [xi.xx[k], xi.xy[k]],
            ))
        })
    }
}

/// `(R - S_out) / tau`, a subgradient of the potential at `S_out` when
/// `S_out` is the proximal point of `R`.
pub fn subgradient_residual(r: &TensorField, s_out: &TensorField, tau: f64) -> TensorField {
    TensorField {
        grid: r.grid,
        bc: r.bc,
        xx: r.xx.iter().zip(&s_out.xx).map(|(a, b)| (a - b) / tau).collect(),
        xy: r.xy.iter().zip(&s_out.xy).map(|(a, b)| (a - b) / tau).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prox_inside_is_shrink() {
        let z = PlasticPotential::prox_with(1.0, 10.0, [1.0, 2.0], 0.5);
        assert!((z[0] - 1.0 / 1.5).abs() < 1e-15 && (z[1] - 2.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn prox_outside_lands_on_ball() {
        let z = PlasticPotential::prox_with(1.0, 1.0, [3.0, -4.0], 0.1);
        assert!((frob(z) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn density_infinite_beyond_yield() {
        assert_eq!(PlasticPotential::density_with(1.0, 1.0, [1.0, 0.0]), f64::INFINITY);
        assert!((PlasticPotential::density_with(2.0, 1.0, [0.5, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prox_subgradient_is_certified() {
        for r in [[0.2, 0.1], [3.0, 1.0], [-0.7, 0.9]] {
            let (a, sig, tau) = (1.3, 0.8, 0.25);
            let s = PlasticPotential::prox_with(a, sig, r, tau);
            let xi = [(r[0] - s[0]) / tau, (r[1] - s[1]) / tau];
            assert!(PlasticPotential::subdifferential_distance_with(a, sig, s, xi) < 1e-12);
        }
    }
}
