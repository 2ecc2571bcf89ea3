//! Double-well and singular phase potentials, the obstacle limit, the
//! mobility entropy, and the small-`alpha` probes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ScalarField;
use crate::materials::Coefficient;

#[derive(Debug, Error, PartialEq)]
pub enum PotentialError {
    #[error("logarithmic regularisation alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("phase value {value} outside the admissible interval (reach {reach})")]
    OutsideDomain { value: f64, reach: f64 },
    #[error("obstacle mode needs the multiplier from the phase solver")]
    MissingMultiplier,
    #[error("multiplier violates complementarity by {0:e}")]
    Complementarity(f64),
    #[error("entropy needs a finite argument, got {0}")]
    EntropyDomain(f64),
}

/// `(1 - s^2)^2 / 4`.
pub mod double_well {
    #[inline]
    pub fn value(s: f64) -> f64 {
        let q = 1.0 - s * s;
        0.25 * q * q
    }

    #[inline]
    pub fn d1(s: f64) -> f64 {
        s * s * s - s
    }

    #[inline]
    pub fn d2(s: f64) -> f64 {
        3.0 * s * s - 1.0
    }

    /// `-inf W''`: the splitting constant that makes `W + kappa s^2 / 2`
    /// convex.
    pub const CONVEXITY_DEFECT: f64 = 1.0;
}

#[inline]
fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `alpha((1+alpha+s)ln(1+alpha+s) + (1+alpha-s)ln(1+alpha-s))` on
/// `|s| <= 1 + alpha`, `+inf` outside.
pub fn log_value(alpha: f64, s: f64) -> f64 {
    let (a, b) = (1.0 + alpha + s, 1.0 + alpha - s);
    if a < 0.0 || b < 0.0 || !s.is_finite() {
        return f64::INFINITY;
    }
    alpha * (xlogx(a) + xlogx(b))
}

pub fn log_d1(alpha: f64, s: f64) -> f64 {
    alpha * ((1.0 + alpha + s) / (1.0 + alpha - s)).ln()
}

pub fn log_d2(alpha: f64, s: f64) -> f64 {
    alpha * (1.0 / (1.0 + alpha + s) + 1.0 / (1.0 + alpha - s))
}

pub fn log_d3(alpha: f64, s: f64) -> f64 {
    let (a, b) = (1.0 + alpha + s, 1.0 + alpha - s);
    alpha * (1.0 / (b * b) - 1.0 / (a * a))
}

/// Inverse of `log_d1`: the phase value whose singular slope is `beta`.
pub fn log_d1_inverse(alpha: f64, beta: f64) -> f64 {
    (1.0 + alpha) * (beta / (2.0 * alpha)).tanh()
}

/// `ln(1 + alpha - |s|)` at `s = log_d1_inverse(alpha, beta)`, evaluated
/// without cancellation. Stays finite for every finite `beta` even once `s`
/// itself has rounded onto the barrier.
pub fn log_barrier_margin_ln(alpha: f64, beta: f64) -> f64 {
    let x = (beta / alpha).abs();
    (2.0 * (1.0 + alpha)).ln() - x - (-x).exp().ln_1p()
}

pub fn obstacle_project(s: f64) -> f64 {
    s.clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PhaseModel {
    Logarithmic { alpha: f64 },
    Obstacle,
}

impl Default for PhaseModel {
    fn default() -> Self {
        PhaseModel::Logarithmic { alpha: 0.1 }
    }
}

impl PhaseModel {
    pub fn validate(&self) -> Result<(), PotentialError> {
        match *self {
            PhaseModel::Logarithmic { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(PotentialError::BadAlpha(alpha)),
            _ => Ok(()),
        }
    }

    /// Largest admissible `|phi|`.
    pub fn reach(&self) -> f64 {
        match *self {
            PhaseModel::Logarithmic { alpha } => 1.0 + alpha,
            PhaseModel::Obstacle => 1.0,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            PhaseModel::Logarithmic { alpha } => Some(alpha),
            PhaseModel::Obstacle => None,
        }
    }

    /// Logarithmic mode needs strict interiority; obstacle mode is closed.
    pub fn admissible(&self, s: f64) -> bool {
        match *self {
            PhaseModel::Logarithmic { alpha } => s.abs() < 1.0 + alpha,
            PhaseModel::Obstacle => s.abs() <= 1.0,
        }
    }

    /// Singular part of the potential.
    pub fn singular_value(&self, s: f64) -> f64 {
        match *self {
            PhaseModel::Logarithmic { alpha } => log_value(alpha, s),
            PhaseModel::Obstacle => {
                if s.abs() <= 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Derivative of the singular part where it is smooth; zero in obstacle
    /// mode, whose subdifferential is carried by the multiplier.
    pub fn singular_d1(&self, s: f64) -> f64 {
        match *self {
            PhaseModel::Logarithmic { alpha } => log_d1(alpha, s),
            PhaseModel::Obstacle => 0.0,
        }
    }

    pub fn singular_d2(&self, s: f64) -> f64 {
        match *self {
            PhaseModel::Logarithmic { alpha } => log_d2(alpha, s),
            PhaseModel::Obstacle => 0.0,
        }
    }

    /// Full potential `W_dw + W_sing`.
    pub fn value(&self, s: f64) -> f64 {
        double_well::value(s) + self.singular_value(s)
    }

    pub fn d1(&self, s: f64) -> f64 {
        double_well::d1(s) + self.singular_d1(s)
    }

    pub fn d2(&self, s: f64) -> f64 {
        double_well::d2(s) + self.singular_d2(s)
    }
}

/// Returns the selection `beta` of the singular subdifferential: `W_sing'`
/// in logarithmic mode, the certified solver multiplier in obstacle mode.
pub fn select_beta(model: &PhaseModel, phi: &[f64], multiplier: Option<&[f64]>, tol: f64) -> Result<Vec<f64>, PotentialError> {
    match model {
        PhaseModel::Logarithmic { alpha } => phi
            .iter()
            .map(|&s| {
                if model.admissible(s) {
                    Ok(log_d1(*alpha, s))
                } else {
                    Err(PotentialError::OutsideDomain { value: s, reach: model.reach() })
                }
            })
            .collect(),
        PhaseModel::Obstacle => {
            let beta = multiplier.ok_or(PotentialError::MissingMultiplier)?;
            let r = complementarity_residual(phi, beta);
            if r > tol {
                return Err(PotentialError::Complementarity(r));
            }
            Ok(beta.to_vec())
        }
    }
}

/// Largest violation of `|phi| <= 1`, `beta = 0` inside, `beta >= 0` at the
/// upper obstacle and `beta <= 0` at the lower one.
pub fn complementarity_residual(phi: &[f64], beta: &[f64]) -> f64 {
    phi.iter().zip(beta).fold(0.0f64, |acc, (&p, &b)| {
        let r = if p >= 1.0 {
            (p - 1.0).max(-b)
        } else if p <= -1.0 {
            (-1.0 - p).max(b)
        } else {
            b.abs()
        };
        acc.max(r)
    })
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Entropy `F` with `F(0) = F'(0) = 0`, `F'' = 1/m`, evaluated as
/// `F(s) = int_0^s (s - q) / m(q) dq`. The mobility is frozen at its
/// pure-phase values beyond `|s| = 1`, so the integral is split there.
pub fn entropy(mobility: &Coefficient, s: f64) -> Result<f64, PotentialError> {
    if !s.is_finite() {
        return Err(PotentialError::EntropyDomain(s));
    }
    Ok(match *mobility {
        Coefficient::Constant(m) => 0.5 * s * s / m,
        Coefficient::Affine { .. } => {
            let (x, w) = gauss_legendre(24);
            let piece = |a: f64, b: f64| {
                let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
                x.iter().zip(&w).map(|(&xi, &wi)| {
                    let q = mid + half * xi;
                    wi * (s - q) / mobility.value(q)
                })
                .sum::<f64>()
                    * half
            };
            let edge = s.signum() * s.abs().min(1.0);
            piece(0.0, edge) + if s.abs() > 1.0 { piece(edge, s) } else { 0.0 }
        }
    })
}

/// Constant-state recovery bound `alpha((alpha+2)ln(alpha+2) + alpha ln alpha)`,
/// the value of the logarithmic potential at `|s| = 1`.
pub fn mosco_recovery_bound(alpha: f64) -> f64 {
    alpha * (xlogx(alpha + 2.0) + xlogx(alpha))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoscoRow {
    pub alpha: f64,
    pub recovery_bound: f64,
    /// `max (|phi| - 1)_+` over the probed trajectory.
    pub distance_to_box: f64,
    /// Time integral of the logarithmic energy over the probed window.
    pub singular_energy: f64,
}

/// Probes a phase trajectory computed with regularisation `alpha`. The
/// fields are the piecewise-constant values on consecutive intervals of
/// length `dt`.
pub fn mosco_liminf_probe(alpha: f64, phases: &[&ScalarField], dt: f64) -> MoscoRow {
    let mut dist = 0.0f64;
    let mut energy = 0.0;
    for phi in phases {
        let area = phi.grid.cell_area();
        for &s in &phi.values {
            dist = dist.max(s.abs() - 1.0);
            energy += dt * area * log_value(alpha, s);
        }
    }
    MoscoRow { alpha, recovery_bound: mosco_recovery_bound(alpha), distance_to_box: dist.max(0.0), singular_energy: energy }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoscoVerdict {
    pub bound_monotone: bool,
    pub bound_small: bool,
    pub distance_within_alpha: bool,
    pub energy_vanishing: bool,
}

impl MoscoVerdict {
    pub fn pass(&self) -> bool {
        self.bound_monotone && self.bound_small && self.distance_within_alpha && self.energy_vanishing
    }
}

/// Rows must be ordered by decreasing `alpha`.
pub fn mosco_verdict(rows: &[MoscoRow]) -> MoscoVerdict {
    let bound_monotone = rows.windows(2).all(|w| w[1].recovery_bound < w[0].recovery_bound);
    let bound_small = rows.last().is_some_and(|r| r.recovery_bound < 1e-3);
    // `1 + alpha` itself is rounded, so allow a few ulps of 1.
    let distance_within_alpha = rows.iter().all(|r| r.distance_to_box <= r.alpha + 4.0 * f64::EPSILON);
    let energy_vanishing = rows.windows(2).all(|w| w[1].singular_energy < w[0].singular_energy)
        && rows.len() >= 2
        && rows[rows.len() - 1].singular_energy < 0.1 * rows[0].singular_energy;
    MoscoVerdict { bound_monotone, bound_small, distance_within_alpha, energy_vanishing }
}

/// `(1 - alpha^theta) phi`, pulling a `[-1, 1]`-valued test phase strictly
/// inside the regularised domain.
pub fn scale_test_phase(phi: &ScalarField, alpha: f64, theta: f64) -> ScalarField {
    let f = 1.0 - alpha.powf(theta);
    ScalarField { values: phi.values.iter().map(|v| f * v).collect(), ..phi.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRow {
    pub alpha: f64,
    pub sup_d1: f64,
    pub sup_d2: f64,
    pub sup_d3: f64,
    pub majorant_d1: f64,
    pub majorant_d2: f64,
    pub majorant_d3: f64,
}

impl DerivativeRow {
    pub fn within_majorants(&self) -> bool {
        self.sup_d1 <= self.majorant_d1 && self.sup_d2 <= self.majorant_d2 && self.sup_d3 <= self.majorant_d3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub theta: f64,
    pub rows: Vec<DerivativeRow>,
    /// Every supremum sits below its majorant.
    pub majorised: bool,
    /// All three majorants decrease strictly along decreasing `alpha`.
    pub majorants_decrease: bool,
    /// All three measured suprema decrease strictly along decreasing `alpha`.
    pub suprema_decrease: bool,
}

impl DerivativeReport {
    pub fn pass(&self) -> bool {
        self.majorised && self.majorants_decrease && self.suprema_decrease
    }
}

const MAJORANT_C1: f64 = 1.0986122886681098; // ln 3
const MAJORANT_C2: f64 = 2.0;
const MAJORANT_C3: f64 = 1.0;

/// Suprema of the logarithmic derivatives on the scaled test phase together
/// with the majorants `alpha(C + |ln(alpha + alpha^theta)|)`,
/// `C alpha/(alpha + alpha^theta)` and `C alpha/(alpha + alpha^theta)^2`.
/// `alphas` should be ordered by decreasing value.
pub fn derivative_bound_report(phi: &ScalarField, alphas: &[f64], theta: f64) -> DerivativeReport {
    let rows: Vec<DerivativeRow> = alphas
        .iter()
        .map(|&alpha| {
            let scaled = scale_test_phase(phi, alpha, theta);
            let (mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64);
            for &s in &scaled.values {
                s1 = s1.max(log_d1(alpha, s).abs());
                s2 = s2.max(log_d2(alpha, s).abs());
                s3 = s3.max(log_d3(alpha, s).abs());
            }
            let gap = alpha + alpha.powf(theta);
            DerivativeRow {
                alpha,
                sup_d1: s1,
                sup_d2: s2,
                sup_d3: s3,
                majorant_d1: alpha * (MAJORANT_C1 + gap.ln().abs()),
                majorant_d2: MAJORANT_C2 * alpha / gap,
                majorant_d3: MAJORANT_C3 * alpha / (gap * gap),
            }
        })
        .collect();
    let majorised = rows.iter().all(DerivativeRow::within_majorants);
    let majorants_decrease = rows.windows(2).all(|w| {
        w[1].majorant_d1 < w[0].majorant_d1 && w[1].majorant_d2 < w[0].majorant_d2 && w[1].majorant_d3 < w[0].majorant_d3
    });
    let suprema_decrease = rows.windows(2).all(|w| w[1].sup_d1 < w[0].sup_d1 && w[1].sup_d2 < w[0].sup_d2 && w[1].sup_d3 < w[0].sup_d3);
    DerivativeReport { theta, rows, majorised, majorants_decrease, suprema_decrease }
}
