//! Discrete operators shared by the time stepper and the diagnostics.
//!
//! Pairings that must cancel in the energy balance are built from the same
//! stencils here: the stress force is the adjoint of the strain, the
//! capillary force the adjoint of phase advection, and the skew-symmetric
//! convection forms vanish when tested with their own argument.

use crate::grid::{self, Axis, Boundary, Grid, ScalarField, Stencil, TensorField, VectorField, AXES};

/// Row entries `(column, coefficient)` of a linear functional of the
/// velocity; columns `0..n` address `v.x`, `n..2n` address `v.y`.
pub type VelocityRow = [(usize, f64); 4];

/// Strain rows of a one-sided difference at cell `k`: `d_x v_x`, `d_y v_y`
/// and the off-diagonal `(d_y v_x + d_x v_y) / 2`.
pub fn one_sided_strain_rows(g: &Grid, stencil: Stencil, k: usize) -> [VelocityRow; 3] {
    let n = g.len();
    let bc = Boundary::Dirichlet;
    let [a, b] = grid::stencil_row(g, Axis::X, stencil, bc, k);
    let [c, d] = grid::stencil_row(g, Axis::Y, stencil, bc, k);
    let xx = [a, b, (0, 0.0), (0, 0.0)];
    let yy = [(n + c.0, c.1), (n + d.0, d.1), (0, 0.0), (0, 0.0)];
    let xy = [(c.0, 0.5 * c.1), (d.0, 0.5 * d.1), (n + a.0, 0.5 * a.1), (n + b.0, 0.5 * b.1)];
    [xx, yy, xy]
}

/// Frobenius weights of `(xx, yy, xy)` in `sym : sym`.
pub const STRAIN_WEIGHTS: [f64; 3] = [1.0, 1.0, 2.0];
pub const VISCOUS_STENCILS: [Stencil; 2] = [Stencil::Forward, Stencil::Backward];

#[inline]
fn eval_row(row: &VelocityRow, vx: &[f64], vy: &[f64]) -> f64 {
    let n = vx.len();
    row.iter().map(|&(c, w)| if c < n { w * vx[c] } else { w * vy[c - n] }).sum()
}

/// Viscous bilinear form `sum_s sum_cells nu sym(D_s v) : sym(D_s w) dA`
/// over forward and backward differences; equals `2 nu |sym grad v|^2` on
/// average and has no spurious null modes.
pub fn viscous_form(g: &Grid, nu: &[f64], v: &VectorField, w: &VectorField) -> f64 {
    let mut acc = 0.0;
    for s in VISCOUS_STENCILS {
        for k in 0..g.len() {
            let rows = one_sided_strain_rows(g, s, k);
            for (r, wt) in rows.iter().zip(STRAIN_WEIGHTS) {
                acc += nu[k] * wt * eval_row(r, &v.x, &v.y) * eval_row(r, &w.x, &w.y);
            }
        }
    }
    acc * g.cell_area()
}

/// Matrix-free viscous operator whose plain dot product with `w` gives the
/// viscous form divided by the cell area.
pub fn viscous_apply(g: &Grid, nu: &[f64], v: &VectorField) -> VectorField {
    let n = g.len();
    let mut out = vec![0.0; 2 * n];
    for s in VISCOUS_STENCILS {
        for k in 0..n {
            let rows = one_sided_strain_rows(g, s, k);
            for (r, wt) in rows.iter().zip(STRAIN_WEIGHTS) {
                let val = nu[k] * wt * eval_row(r, &v.x, &v.y);
                for &(c, w) in r {
                    out[c] += w * val;
                }
            }
        }
    }
    let y = out.split_off(n);
    VectorField { grid: *g, bc: Boundary::Dirichlet, x: out, y }
}

/// Viscous strain used for reporting: average of the one-sided symmetric
/// gradients' Frobenius energy per cell.
pub fn viscous_density(g: &Grid, nu: &[f64], v: &VectorField) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for s in VISCOUS_STENCILS {
        for (k, o) in out.iter_mut().enumerate() {
            let rows = one_sided_strain_rows(g, s, k);
            for (r, wt) in rows.iter().zip(STRAIN_WEIGHTS) {
                let e = eval_row(r, &v.x, &v.y);
                *o += nu[k] * wt * e * e;
            }
        }
    }
    out
}

/// Deviatoric part of the central symmetric velocity gradient.
pub fn strain_dev(v: &VectorField) -> TensorField {
    let gr = grid::velocity_gradient(v);
    let n = v.grid.len();
    let mut xx = Vec::with_capacity(n);
    let mut xy = Vec::with_capacity(n);
    for k in 0..n {
        xx.push(0.5 * (gr.xx[k] - gr.yy[k]));
        xy.push(0.5 * (gr.xy[k] + gr.yx[k]));
    }
    TensorField { grid: v.grid, bc: Boundary::Neumann, xx, xy }
}

/// Spin `w` of the central velocity gradient, skew part `[[0, w], [-w, 0]]`.
pub fn spin(v: &VectorField) -> Vec<f64> {
    let gr = grid::velocity_gradient(v);
    gr.xy.iter().zip(&gr.yx).map(|(a, b)| 0.5 * (a - b)).collect()
}

/// `S W - W S` for the spin `w`; pointwise Frobenius-orthogonal to `S`.
pub fn jaumann(s: &TensorField, w: &[f64]) -> TensorField {
    let n = s.grid.len();
    let mut xx = Vec::with_capacity(n);
    let mut xy = Vec::with_capacity(n);
    for k in 0..n {
        xx.push(-2.0 * w[k] * s.xy[k]);
        xy.push(2.0 * w[k] * s.xx[k]);
    }
    TensorField { grid: s.grid, bc: s.bc, xx, xy }
}

/// `G^T (eta S)` with the central Dirichlet gradient: the adjoint of
/// `eta * strain` under the Frobenius pairing.
pub fn stress_force(eta: &[f64], s: &TensorField) -> VectorField {
    let g = &s.grid;
    let n = g.len();
    let bc = Boundary::Dirichlet;
    let exx: Vec<f64> = (0..n).map(|k| eta[k] * s.xx[k]).collect();
    let exy: Vec<f64> = (0..n).map(|k| eta[k] * s.xy[k]).collect();
    let eyy: Vec<f64> = exx.iter().map(|v| -v).collect();
    let mut x = grid::diff_transpose(g, Axis::X, Stencil::Central, bc, &exx);
    grid::diff_transpose_add(g, Axis::Y, Stencil::Central, bc, &exy, &mut x);
    let mut y = grid::diff_transpose(g, Axis::X, Stencil::Central, bc, &exy);
    grid::diff_transpose_add(g, Axis::Y, Stencil::Central, bc, &eyy, &mut y);
    VectorField { grid: *g, bc, x, y }
}

/// Skew-symmetric convection `(m . G u - G^T(m u)) / 2` of one component,
/// with `G` the central difference for boundary type `bc`.
pub fn skew_convection(g: &Grid, mx: &[f64], my: &[f64], u: &[f64], bc: Boundary) -> Vec<f64> {
    let n = g.len();
    let mut out = vec![0.0; n];
    for (axis, m) in [(Axis::X, mx), (Axis::Y, my)] {
        let du = grid::diff(g, axis, Stencil::Central, bc, u);
        for k in 0..n {
            out[k] += 0.5 * m[k] * du[k];
        }
        let mu: Vec<f64> = (0..n).map(|k| -0.5 * m[k] * u[k]).collect();
        grid::diff_transpose_add(g, axis, Stencil::Central, bc, &mu, &mut out);
    }
    out
}

/// Transport of a tensor by `v` in skew-symmetric form, component-wise.
pub fn tensor_transport(v: &VectorField, s: &TensorField) -> TensorField {
    let g = &s.grid;
    TensorField {
        grid: *g,
        bc: s.bc,
        xx: skew_convection(g, &v.x, &v.y, &s.xx, s.bc),
        xy: skew_convection(g, &v.x, &v.y, &s.xy, s.bc),
    }
}

/// `v . grad phi` with the central Neumann gradient.
pub fn scalar_advection(v: &VectorField, phi: &ScalarField) -> Vec<f64> {
    let gp = grid::gradient(phi);
    (0..v.grid.len()).map(|k| v.x[k] * gp.x[k] + v.y[k] * gp.y[k]).collect()
}

/// `mu grad phi`, adjoint of `scalar_advection` tested with `mu`.
pub fn capillary(mu: &ScalarField, phi: &ScalarField) -> VectorField {
    let gp = grid::gradient(phi);
    VectorField {
        grid: mu.grid,
        bc: Boundary::Dirichlet,
        x: gp.x.iter().zip(&mu.values).map(|(a, b)| a * b).collect(),
        y: gp.y.iter().zip(&mu.values).map(|(a, b)| a * b).collect(),
    }
}

/// Face weights for a cell coefficient, one array per axis.
pub fn face_weights(g: &Grid, c: &[f64]) -> [Vec<f64>; 2] {
    [grid::face_average(g, Axis::X, c), grid::face_average(g, Axis::Y, c)]
}

/// `-div(w grad u)` on faces.
pub fn weighted_neg_laplacian(g: &Grid, w: &[Vec<f64>; 2], u: &[f64]) -> Vec<f64> {
    grid::face_operator(g, u, Some(&w[0]), Some(&w[1]))
}

/// `int w grad a . grad b` on faces.
pub fn weighted_face_form(g: &Grid, w: &[Vec<f64>; 2], a: &[f64], b: &[f64]) -> f64 {
    grid::dot(g, &weighted_neg_laplacian(g, w, a), b)
}

/// `int |grad S|^2` (Frobenius) on faces.
pub fn tensor_face_form(a: &TensorField, b: &TensorField) -> f64 {
    let g = &a.grid;
    let ones = [vec![1.0; g.len()], vec![1.0; g.len()]];
    2.0 * (weighted_face_form(g, &ones, &a.xx, &b.xx) + weighted_face_form(g, &ones, &a.xy, &b.xy))
}

/// Central Neumann gradient of each stress component, `dS_ij / dx_k`.
pub struct TensorGradient {
    pub xx: [Vec<f64>; 2],
    pub xy: [Vec<f64>; 2],
}

pub fn tensor_gradient(s: &TensorField) -> TensorGradient {
    let g = &s.grid;
    let d = |u: &[f64], a| grid::diff(g, a, Stencil::Central, s.bc, u);
    TensorGradient { xx: AXES.map(|a| d(&s.xx, a)), xy: AXES.map(|a| d(&s.xy, a)) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|k| ((k as f64 + 1.0) * (seed as f64 + 0.618)).sin()).collect()
    }

    #[test]
    fn skew_convection_is_energy_neutral() {
        let g = Grid::new(7, 5, 1.0, 0.7).unwrap();
        let n = g.len();
        let (mx, my, u) = (rand_vec(n, 1), rand_vec(n, 2), rand_vec(n, 3));
        for bc in [Boundary::Neumann, Boundary::Dirichlet] {
            let c = skew_convection(&g, &mx, &my, &u, bc);
            let e: f64 = c.iter().zip(&u).map(|(a, b)| a * b).sum();
            assert!(e.abs() < 1e-12, "{e}");
        }
    }

    #[test]
    fn viscous_apply_matches_form() {
        let g = Grid::new(6, 5, 1.0, 1.0).unwrap();
        let n = g.len();
        let nu = rand_vec(n, 4).iter().map(|v| 1.5 + v).collect::<Vec<_>>();
        let v = VectorField::from_components(g, Boundary::Dirichlet, rand_vec(n, 5), rand_vec(n, 6)).unwrap();
        let w = VectorField::from_components(g, Boundary::Dirichlet, rand_vec(n, 7), rand_vec(n, 8)).unwrap();
        let av = viscous_apply(&g, &nu, &v);
        let lhs = grid::inner_vector(&av, &w);
        let rhs = viscous_form(&g, &nu, &v, &w);
        assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn stress_force_is_adjoint_of_strain() {
        let g = Grid::new(6, 6, 1.0, 1.0).unwrap();
        let n = g.len();
        let eta: Vec<f64> = rand_vec(n, 9).iter().map(|v| 2.0 + v).collect();
        let s = TensorField::from_components(g, Boundary::Neumann, rand_vec(n, 10), rand_vec(n, 11)).unwrap();
        let v = VectorField::from_components(g, Boundary::Dirichlet, rand_vec(n, 12), rand_vec(n, 13)).unwrap();
        let f = stress_force(&eta, &s);
        let e = strain_dev(&v);
        let es = TensorField { xx: (0..n).map(|k| eta[k] * s.xx[k]).collect(), xy: (0..n).map(|k| eta[k] * s.xy[k]).collect(), ..s.clone() };
        let lhs = grid::inner_vector(&f, &v);
        let rhs = grid::inner_tensor(&es, &e);
        // Differ only by the trace of the gradient paired with tr S = 0.
        assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0), "{lhs} {rhs}");
    }
}
