//! Phase-dependent material coefficients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaterialError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

fn invalid(name: &'static str, reason: impl Into<String>) -> MaterialError {
    MaterialError::InvalidParameter { name, reason: reason.into() }
}

/// A coefficient that is either constant or interpolates linearly between
/// its pure-phase values; the phase argument is clipped to `[-1, 1]` so the
/// value stays between the two endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Affine { minus: f64, plus: f64 },
}

impl Coefficient {
    #[inline]
    pub fn value(&self, phi: f64) -> f64 {
        match *self {
            Coefficient::Constant(c) => c,
            Coefficient::Affine { minus, plus } => {
                let s = phi.clamp(-1.0, 1.0);
                // Clamped again so rounding cannot step outside the bounds.
                (0.5 * (minus + plus) + 0.5 * (plus - minus) * s).clamp(minus.min(plus), minus.max(plus))
            }
        }
    }

    pub fn lower_bound(&self) -> f64 {
        match *self {
            Coefficient::Constant(c) => c,
            Coefficient::Affine { minus, plus } => minus.min(plus),
        }
    }

    pub fn upper_bound(&self) -> f64 {
        match *self {
            Coefficient::Constant(c) => c,
            Coefficient::Affine { minus, plus } => minus.max(plus),
        }
    }

    /// Slope in `phi` on `(-1, 1)`.
    pub fn slope(&self) -> f64 {
        match *self {
            Coefficient::Constant(_) => 0.0,
            Coefficient::Affine { minus, plus } => 0.5 * (plus - minus),
        }
    }

    pub fn values(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter().map(|&p| self.value(p)).collect()
    }

    fn validate(&self, name: &'static str) -> Result<(), MaterialError> {
        let (lo, hi) = (self.lower_bound(), self.upper_bound());
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(invalid(name, "must be finite"));
        }
        if lo <= 0.0 {
            return Err(invalid(name, format!("lower bound {lo} must be positive")));
        }
        Ok(())
    }
}

/// How the relative mass flux is built from the chemical potential.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluxMode {
    /// `J = -(rho2 - rho1)/2 grad mu`, the form used by the time stepper.
    #[default]
    Discrete,
    /// `J = -(rho2 - rho1)/2 m(phi) grad mu`.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Materials {
    /// Density of the phase at `phi = -1`.
    pub rho_minus: f64,
    /// Density of the phase at `phi = +1`.
    pub rho_plus: f64,
    pub viscosity: Coefficient,
    pub elastic_modulus: Coefficient,
    pub mobility: Coefficient,
    pub plastic_modulus: Coefficient,
    pub yield_stress: f64,
    pub stress_diffusion: f64,
    pub flux_mode: FluxMode,
}

impl Default for Materials {
    fn default() -> Self {
        Self {
            rho_minus: 1.0,
            rho_plus: 3.0,
            viscosity: Coefficient::Constant(1.0),
            elastic_modulus: Coefficient::Constant(1.0),
            mobility: Coefficient::Constant(1.0),
            plastic_modulus: Coefficient::Constant(1.0),
            yield_stress: 1.0,
            stress_diffusion: 0.0,
            flux_mode: FluxMode::Discrete,
        }
    }
}

impl Materials {
    /// Checks positivity of every coefficient. `phase_reach` is the largest
    /// `|phi|` the phase model admits; the affine density must stay positive
    /// up to it.
    pub fn validate(&self, phase_reach: f64) -> Result<(), MaterialError> {
        if !(self.rho_minus > 0.0 && self.rho_plus > 0.0) {
            return Err(invalid("density", "pure-phase densities must be positive"));
        }
        let lo = self.density(-phase_reach).min(self.density(phase_reach));
        if lo <= 0.0 {
            return Err(invalid("density", format!("density {lo} is not positive at |phi| = {phase_reach}")));
        }
        self.viscosity.validate("viscosity")?;
        self.elastic_modulus.validate("elastic_modulus")?;
        self.mobility.validate("mobility")?;
        self.plastic_modulus.validate("plastic_modulus")?;
        if !(self.yield_stress > 0.0 && self.yield_stress.is_finite()) {
            return Err(invalid("yield_stress", "must be positive and finite"));
        }
        if !(self.stress_diffusion >= 0.0 && self.stress_diffusion.is_finite()) {
            return Err(invalid("stress_diffusion", "must be non-negative and finite"));
        }
        Ok(())
    }

    /// Affine in `phi` without clipping, so mass balance and phase transport
    /// stay equivalent.
    #[inline]
    pub fn density(&self, phi: f64) -> f64 {
        0.5 * (self.rho_minus + self.rho_plus) + 0.5 * (self.rho_plus - self.rho_minus) * phi
    }

    /// `(rho2 - rho1) / 2`.
    #[inline]
    pub fn density_jump(&self) -> f64 {
        0.5 * (self.rho_plus - self.rho_minus)
    }

    pub fn densities(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter().map(|&p| self.density(p)).collect()
    }

    /// Flux prefactor multiplying `-grad mu` at a cell.
    #[inline]
    pub fn flux_weight(&self, phi: f64) -> f64 {
        match self.flux_mode {
            FluxMode::Discrete => self.density_jump(),
            FluxMode::Continuous => self.density_jump() * self.mobility.value(phi),
        }
    }

    /// Relative mass flux `-w(phi) grad mu` cellwise, with the prefactor
    /// of [`Materials::flux_weight`]. Linear in the gradient.
    pub fn mass_flux(&self, phi: &[f64], grad_x: &[f64], grad_y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w: Vec<f64> = phi.iter().map(|&p| self.flux_weight(p)).collect();
        (w.iter().zip(grad_x).map(|(a, g)| -a * g).collect(), w.iter().zip(grad_y).map(|(a, g)| -a * g).collect())
    }

    /// Smallest viscosity over all phases.
    pub fn viscosity_floor(&self) -> f64 {
        self.viscosity.lower_bound()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_coefficient_hits_endpoints() {
        let c = Coefficient::Affine { minus: 2.0, plus: 4.0 };
        assert_eq!(c.value(-1.0), 2.0);
        assert_eq!(c.value(1.0), 4.0);
        assert_eq!(c.value(0.0), 3.0);
        assert_eq!(c.value(7.0), 4.0);
    }

    #[test]
    fn density_midpoint() {
        let m = Materials::default();
        assert_eq!(m.density(0.0), 2.0);
        assert_eq!(m.density(-1.0), 1.0);
        assert_eq!(m.density(1.0), 3.0);
    }

    #[test]
    fn rejects_nonpositive_viscosity() {
        let m = Materials { viscosity: Coefficient::Affine { minus: 0.0, plus: 1.0 }, ..Default::default() };
        assert!(m.validate(1.0).is_err());
    }

    #[test]
    fn rejects_density_that_turns_negative() {
        let m = Materials { rho_minus: 0.1, rho_plus: 10.0, ..Default::default() };
        assert!(m.validate(1.5).is_err());
        assert!(m.validate(1.0).is_ok());
    }
}
