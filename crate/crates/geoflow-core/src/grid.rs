//! Cell-centred rectangular grid, discrete fields and difference operators.
//!
//! Every first-order difference is a two-point stencil per cell with ghost
//! values mirrored across the wall: `+u` for Neumann data, `-u` for
//! Dirichlet data. With that convention the central Neumann difference is
//! exactly minus the transpose of the central Dirichlet difference, which is
//! what makes the discrete energy bookkeeping close.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_CELLS: usize = 4;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs at least {min} cells per direction, got {nx}x{ny}", min = MIN_CELLS)]
    TooSmall { nx: usize, ny: usize },
    #[error("domain lengths must be positive and finite, got {lx}x{ly}")]
    BadDomain { lx: f64, ly: f64 },
    #[error("field length {got} does not match grid size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("pressure solve produced non-finite values")]
    PoissonNonFinite,
    #[error("pressure solve residual {residual:e} exceeds {tol:e}")]
    PoissonNonConvergence { residual: f64, tol: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed field dump: {0}")]
    Malformed(String),
    #[error("non-finite {component} value {value} at cell ({i},{j})")]
    NonFinite { component: &'static str, i: usize, j: usize, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, GridError> {
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(GridError::TooSmall { nx, ny });
        }
        if !(lx.is_finite() && ly.is_finite() && lx > 0.0 && ly > 0.0) {
            return Err(GridError::BadDomain { lx, ly });
        }
        Ok(Self { nx, ny, lx, ly })
    }

    pub fn unit_square(n: usize) -> Result<Self, GridError> {
        Self::new(n, n, 1.0, 1.0)
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.dx(), (j as f64 + 0.5) * self.dy())
    }

    /// Same domain with twice the cells in each direction.
    pub fn refined(&self) -> Grid {
        Grid { nx: 2 * self.nx, ny: 2 * self.ny, ..*self }
    }

    pub fn check_len(&self, got: usize) -> Result<(), GridError> {
        if got == self.len() {
            Ok(())
        } else {
            Err(GridError::LengthMismatch { expected: self.len(), got })
        }
    }

    /// Length check plus the first non-finite entry, located by cell.
    pub fn check_values(&self, component: &'static str, values: &[f64]) -> Result<(), GridError> {
        self.check_len(values.len())?;
        match values.iter().position(|v| !v.is_finite()) {
            Some(k) => {
                let (i, j) = self.coords(k);
                Err(GridError::NonFinite { component, i, j, value: values[k] })
            }
            None => Ok(()),
        }
    }

    fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.nx,
            Axis::Y => self.ny,
        }
    }

    fn axis_step(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.dx(),
            Axis::Y => self.dy(),
        }
    }

    fn axis_stride(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => 1,
            Axis::Y => self.nx,
        }
    }

    fn axis_pos(&self, k: usize, axis: Axis) -> usize {
        match axis {
            Axis::X => k % self.nx,
            Axis::Y => k / self.nx,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Neumann,
    Dirichlet,
}

impl Boundary {
    pub fn parity(self) -> f64 {
        match self {
            Boundary::Neumann => 1.0,
            Boundary::Dirichlet => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

pub const AXES: [Axis; 2] = [Axis::X, Axis::Y];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    Central,
    Forward,
    Backward,
}

/// Nonzero entries `(column, coefficient)` of row `k` of a one-dimensional
/// difference along `axis`. Entries may repeat a column at the walls.
#[inline]
pub fn stencil_row(grid: &Grid, axis: Axis, stencil: Stencil, bc: Boundary, k: usize) -> [(usize, f64); 2] {
    let n = grid.axis_len(axis) as isize;
    let h = grid.axis_step(axis);
    let stride = grid.axis_stride(axis) as isize;
    let p = grid.axis_pos(k, axis) as isize;
    let parity = bc.parity();
    let resolve = |off: isize, c: f64| -> (usize, f64) {
        let q = p + off;
        if q < 0 || q >= n {
            (k, c * parity)
        } else {
            ((k as isize + off * stride) as usize, c)
        }
    };
    match stencil {
        Stencil::Central => [resolve(1, 0.5 / h), resolve(-1, -0.5 / h)],
        Stencil::Forward => [resolve(1, 1.0 / h), (k, -1.0 / h)],
        Stencil::Backward => [(k, 1.0 / h), resolve(-1, -1.0 / h)],
    }
}

/// `out = D u` for the one-dimensional difference `D`.
pub fn diff(grid: &Grid, axis: Axis, stencil: Stencil, bc: Boundary, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for (k, o) in out.iter_mut().enumerate() {
        let [(a, ca), (b, cb)] = stencil_row(grid, axis, stencil, bc, k);
        *o = ca * u[a] + cb * u[b];
    }
    out
}

/// `out += D^T w`.
pub fn diff_transpose_add(grid: &Grid, axis: Axis, stencil: Stencil, bc: Boundary, w: &[f64], out: &mut [f64]) {
    for (k, &wk) in w.iter().enumerate() {
        let [(a, ca), (b, cb)] = stencil_row(grid, axis, stencil, bc, k);
        out[a] += ca * wk;
        out[b] += cb * wk;
    }
}

pub fn diff_transpose(grid: &Grid, axis: Axis, stencil: Stencil, bc: Boundary, w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    diff_transpose_add(grid, axis, stencil, bc, w, &mut out);
    out
}

/// Face-flux operator `sum_axis Fwd^T (w_face * Fwd u)` with Neumann walls.
/// Face weights are stored at the lower cell of each interior face; with unit
/// weights this is the compact five-point `-Laplacian`.
pub fn face_operator(grid: &Grid, u: &[f64], wx: Option<&[f64]>, wy: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for (axis, w) in [(Axis::X, wx), (Axis::Y, wy)] {
        let mut flux = diff(grid, axis, Stencil::Forward, Boundary::Neumann, u);
        if let Some(w) = w {
            for (f, wf) in flux.iter_mut().zip(w) {
                *f *= wf;
            }
        }
        diff_transpose_add(grid, axis, Stencil::Forward, Boundary::Neumann, &flux, &mut out);
    }
    out
}

/// Arithmetic mean of cell values onto the interior faces along `axis`.
pub fn face_average(grid: &Grid, axis: Axis, c: &[f64]) -> Vec<f64> {
    let stride = grid.axis_stride(axis);
    let n = grid.axis_len(axis);
    (0..grid.len())
        .map(|k| {
            if grid.axis_pos(k, axis) + 1 < n {
                0.5 * (c[k] + c[k + stride])
            } else {
                c[k]
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub grid: Grid,
    pub bc: Boundary,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid, bc: Boundary) -> Self {
        Self { grid, bc, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, bc: Boundary, c: f64) -> Self {
        Self { grid, bc, values: vec![c; grid.len()] }
    }

    pub fn from_values(grid: Grid, bc: Boundary, values: Vec<f64>) -> Result<Self, GridError> {
        grid.check_values("value", &values)?;
        Ok(Self { grid, bc, values })
    }

    pub fn from_fn(grid: Grid, bc: Boundary, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.center(i, j);
                values.push(f(x, y));
            }
        }
        Self { grid, bc, values }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub grid: Grid,
    pub bc: Boundary,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Grid, bc: Boundary) -> Self {
        Self { grid, bc, x: vec![0.0; grid.len()], y: vec![0.0; grid.len()] }
    }

    pub fn from_components(grid: Grid, bc: Boundary, x: Vec<f64>, y: Vec<f64>) -> Result<Self, GridError> {
        grid.check_values("x", &x)?;
        grid.check_values("y", &y)?;
        Ok(Self { grid, bc, x, y })
    }

    /// Discrete curl `(d_y psi, -d_x psi)` of a stream function. Central
    /// differences along different axes commute, so the result has zero
    /// discrete divergence whenever `psi` vanishes next to the walls.
    pub fn curl_of(psi: &ScalarField) -> Self {
        let g = &psi.grid;
        let bc = Boundary::Dirichlet;
        let x = diff(g, Axis::Y, Stencil::Central, bc, &psi.values);
        let y: Vec<f64> = diff(g, Axis::X, Stencil::Central, bc, &psi.values).into_iter().map(|v| -v).collect();
        Self { grid: *g, bc, x, y }
    }

    pub fn max_norm(&self) -> f64 {
        self.x.iter().zip(&self.y).fold(0.0f64, |m, (a, b)| m.max(a.hypot(*b)))
    }
}

/// Symmetric trace-free 2x2 tensor field stored as `(xx, xy)`; `yy = -xx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorField {
    pub grid: Grid,
    pub bc: Boundary,
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
}

impl TensorField {
    pub fn zeros(grid: Grid, bc: Boundary) -> Self {
        Self { grid, bc, xx: vec![0.0; grid.len()], xy: vec![0.0; grid.len()] }
    }

    pub fn from_components(grid: Grid, bc: Boundary, xx: Vec<f64>, xy: Vec<f64>) -> Result<Self, GridError> {
        grid.check_values("xx", &xx)?;
        grid.check_values("xy", &xy)?;
        Ok(Self { grid, bc, xx, xy })
    }

    /// Frobenius norm at cell `k`.
    #[inline]
    pub fn norm_at(&self, k: usize) -> f64 {
        (2.0 * (self.xx[k] * self.xx[k] + self.xy[k] * self.xy[k])).sqrt()
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len()).fold(0.0f64, |m, k| m.max(self.norm_at(k)))
    }
}

/// Full discrete velocity gradient, `g_ab = d_b v_a`, central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yx: Vec<f64>,
    pub yy: Vec<f64>,
}

/// Symmetric part of a 2x2 tensor field (not necessarily trace-free).
#[derive(Clone, Debug, PartialEq)]
pub struct SymField {
    pub xx: Vec<f64>,
    pub yy: Vec<f64>,
    pub xy: Vec<f64>,
}

pub fn gradient(u: &ScalarField) -> VectorField {
    let g = &u.grid;
    VectorField {
        grid: *g,
        bc: u.bc,
        x: diff(g, Axis::X, Stencil::Central, u.bc, &u.values),
        y: diff(g, Axis::Y, Stencil::Central, u.bc, &u.values),
    }
}

/// Central divergence; for Dirichlet velocity this is the constraint the
/// projection enforces, and `gradient` of Neumann data is its negative adjoint.
pub fn divergence(v: &VectorField) -> ScalarField {
    let g = &v.grid;
    let mut values = diff(g, Axis::X, Stencil::Central, v.bc, &v.x);
    for (d, e) in values.iter_mut().zip(diff(g, Axis::Y, Stencil::Central, v.bc, &v.y)) {
        *d += e;
    }
    ScalarField { grid: *g, bc: Boundary::Neumann, values }
}

/// Compact five-point Laplacian with Neumann walls.
pub fn laplacian(u: &ScalarField) -> ScalarField {
    let values = face_operator(&u.grid, &u.values, None, None).into_iter().map(|v| -v).collect();
    ScalarField { grid: u.grid, bc: u.bc, values }
}

pub fn velocity_gradient(v: &VectorField) -> GradientField {
    let g = &v.grid;
    let c = Stencil::Central;
    GradientField {
        xx: diff(g, Axis::X, c, v.bc, &v.x),
        xy: diff(g, Axis::Y, c, v.bc, &v.x),
        yx: diff(g, Axis::X, c, v.bc, &v.y),
        yy: diff(g, Axis::Y, c, v.bc, &v.y),
    }
}

/// Split into symmetric part and spin `w`, where the skew part is
/// `[[0, w], [-w, 0]]`.
pub fn sym_skw_split(g: &GradientField) -> (SymField, Vec<f64>) {
    let n = g.xx.len();
    let mut xy = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for k in 0..n {
        xy.push(0.5 * (g.xy[k] + g.yx[k]));
        w.push(0.5 * (g.xy[k] - g.yx[k]));
    }
    (SymField { xx: g.xx.clone(), yy: g.yy.clone(), xy }, w)
}

pub fn integrate(u: &ScalarField) -> f64 {
    u.values.iter().sum::<f64>() * u.grid.cell_area()
}

pub fn mean(u: &ScalarField) -> f64 {
    integrate(u) / (u.grid.lx * u.grid.ly)
}

pub fn dot(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * grid.cell_area()
}

pub fn inner_scalar(a: &ScalarField, b: &ScalarField) -> f64 {
    dot(&a.grid, &a.values, &b.values)
}

pub fn inner_vector(a: &VectorField, b: &VectorField) -> f64 {
    dot(&a.grid, &a.x, &b.x) + dot(&a.grid, &a.y, &b.y)
}

/// Frobenius pairing of two symmetric trace-free fields.
pub fn inner_tensor(a: &TensorField, b: &TensorField) -> f64 {
    2.0 * (dot(&a.grid, &a.xx, &b.xx) + dot(&a.grid, &a.xy, &b.xy))
}

pub fn norm_scalar(a: &ScalarField) -> f64 {
    inner_scalar(a, a).sqrt()
}

pub fn norm_vector(a: &VectorField) -> f64 {
    inner_vector(a, a).sqrt()
}

pub fn norm_tensor(a: &TensorField) -> f64 {
    inner_tensor(a, a).sqrt()
}

/// Squared L2 norm of the compact (face) gradient of Neumann data.
pub fn face_gradient_sq(grid: &Grid, u: &[f64]) -> f64 {
    let lap = face_operator(grid, u, None, None);
    dot(grid, &lap, u)
}

fn dense_1d(n: usize, h: f64, stencil: Stencil, bc: Boundary) -> Mat<f64> {
    // A one-row grid reuses the two-dimensional stencil builder.
    let g = Grid { nx: n, ny: 1, lx: h * n as f64, ly: 1.0 };
    let mut m = Mat::zeros(n, n);
    for k in 0..n {
        for (c, v) in stencil_row(&g, Axis::X, stencil, bc, k) {
            m[(k, c)] += v;
        }
    }
    m
}

/// Exact solver for the pressure operator `div_D grad_N` by fast
/// diagonalisation of the separable one-dimensional factors.
#[derive(Clone, Debug)]
pub struct Projector {
    grid: Grid,
    qx: Mat<f64>,
    ex: Vec<f64>,
    qy: Mat<f64>,
    ey: Vec<f64>,
}

pub const PROJECTION_TOL: f64 = 1e-11;

impl Projector {
    pub fn new(grid: Grid) -> Self {
        let factor = |n: usize, h: f64| {
            let dn = dense_1d(n, h, Stencil::Central, Boundary::Neumann);
            let dd = dense_1d(n, h, Stencil::Central, Boundary::Dirichlet);
            // The factors have paired eigenvalues; nalgebra's QR sweep loses
            // orthogonality on those, the divide-and-conquer solver does not.
            let t = &dd * &dn;
            let sym = Mat::from_fn(n, n, |i, j| 0.5 * (t[(i, j)] + t[(j, i)]));
            let eig = sym.self_adjoint_eigen(Side::Lower).expect("symmetric eigenproblem");
            let vals = (0..n).map(|i| eig.S()[i]).collect::<Vec<f64>>();
            (eig.U().to_owned(), vals)
        };
        let (qx, ex) = factor(grid.nx, grid.dx());
        let (qy, ey) = factor(grid.ny, grid.dy());
        Self { grid, qx, ex, qy, ey }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Applies `div_D grad_N` to `p`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let gp = gradient(&ScalarField { grid: *g, bc: Boundary::Neumann, values: p.to_vec() });
        divergence(&VectorField { bc: Boundary::Dirichlet, ..gp }).values
    }

    /// Solves `div_D grad_N p = rhs` in the mean-zero subspace.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, GridError> {
        let g = &self.grid;
        g.check_len(rhs.len())?;
        let (nx, ny) = (g.nx, g.ny);
        let r = Mat::from_fn(nx, ny, |i, j| rhs[g.idx(i, j)]);
        let mut hat = self.qx.transpose() * &r * &self.qy;
        let amax = |e: &[f64]| e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = amax(&self.ex) + amax(&self.ey);
        for i in 0..nx {
            for j in 0..ny {
                let lam = self.ex[i] + self.ey[j];
                hat[(i, j)] = if lam.abs() > 1e-10 * scale { hat[(i, j)] / lam } else { 0.0 };
            }
        }
        let pm = &self.qx * &hat * self.qy.transpose();
        let mut p = vec![0.0; g.len()];
        for j in 0..ny {
            for i in 0..nx {
                p[g.idx(i, j)] = pm[(i, j)];
            }
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GridError::PoissonNonFinite);
        }
        let m = p.iter().sum::<f64>() / p.len() as f64;
        p.iter_mut().for_each(|v| *v -= m);
        let rm = rhs.iter().sum::<f64>() / rhs.len() as f64;
        let lp = self.apply(&p);
        let residual = lp.iter().zip(rhs).fold(0.0f64, |a, (l, r)| a.max((l - (r - rm)).abs()));
        let size = rhs.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        let tol = PROJECTION_TOL * (1.0 + size);
        if residual > tol {
            return Err(GridError::PoissonNonConvergence { residual, tol });
        }
        Ok(p)
    }

    /// Discrete Leray projection onto `ker div_D`, orthogonal in L2.
    pub fn project(&self, v: &VectorField) -> Result<VectorField, GridError> {
        let d = divergence(v);
        let q = self.solve(&d.values)?;
        let gq = gradient(&ScalarField { grid: self.grid, bc: Boundary::Neumann, values: q });
        let x = v.x.iter().zip(&gq.x).map(|(a, b)| a - b).collect();
        let y = v.y.iter().zip(&gq.y).map(|(a, b)| a - b).collect();
        Ok(VectorField { grid: self.grid, bc: v.bc, x, y })
    }
}

pub fn leray_project(v: &VectorField) -> Result<VectorField, GridError> {
    Projector::new(v.grid).project(v)
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyField {
    Scalar(ScalarField),
    Vector(VectorField),
    Tensor(TensorField),
}

impl AnyField {
    pub fn grid(&self) -> &Grid {
        match self {
            AnyField::Scalar(f) => &f.grid,
            AnyField::Vector(f) => &f.grid,
            AnyField::Tensor(f) => &f.grid,
        }
    }

    pub fn boundary(&self) -> Boundary {
        match self {
            AnyField::Scalar(f) => f.bc,
            AnyField::Vector(f) => f.bc,
            AnyField::Tensor(f) => f.bc,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            AnyField::Scalar(_) => "scalar",
            AnyField::Vector(_) => "vector",
            AnyField::Tensor(_) => "tensor",
        }
    }

    fn components(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            AnyField::Scalar(f) => vec![("value", &f.values)],
            AnyField::Vector(f) => vec![("x", &f.x), ("y", &f.y)],
            AnyField::Tensor(f) => vec![("xx", &f.xx), ("xy", &f.xy)],
        }
    }
}

/// JSON sidecar written next to every field dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub grid: Grid,
    pub role: String,
    pub time: f64,
    pub kind: String,
    pub boundary: Boundary,
    pub components: Vec<String>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.csv` (`i,j,<components>`) and `<stem>.json`.
pub fn dump_field(stem: &Path, role: &str, time: f64, field: &AnyField) -> Result<(), GridError> {
    let g = *field.grid();
    let comps = field.components();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(with_ext(stem, "csv"))?));
    let mut header = vec!["i".to_string(), "j".to_string()];
    header.extend(comps.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            let mut rec = vec![i.to_string(), j.to_string()];
            rec.extend(comps.iter().map(|(_, v)| format!("{:e}", v[k])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let meta = FieldMeta {
        grid: g,
        role: role.to_string(),
        time,
        kind: field.kind().to_string(),
        boundary: field.boundary(),
        components: comps.iter().map(|(n, _)| n.to_string()).collect(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(with_ext(stem, "json"))?), &meta)?;
    Ok(())
}

pub fn load_field(stem: &Path) -> Result<(FieldMeta, AnyField), GridError> {
    let meta: FieldMeta = serde_json::from_reader(BufReader::new(File::open(with_ext(stem, "json"))?))?;
    let g = Grid::new(meta.grid.nx, meta.grid.ny, meta.grid.lx, meta.grid.ly)?;
    let nc = meta.components.len();
    let mut data = vec![vec![f64::NAN; g.len()]; nc];
    let mut seen = vec![false; g.len()];
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(with_ext(stem, "csv"))?));
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != nc + 2 {
            return Err(GridError::Malformed(format!("expected {} columns, found {}", nc + 2, rec.len())));
        }
        let parse_idx = |s: &str| s.trim().parse::<usize>().map_err(|e| GridError::Malformed(e.to_string()));
        let (i, j) = (parse_idx(&rec[0])?, parse_idx(&rec[1])?);
        if i >= g.nx || j >= g.ny {
            return Err(GridError::Malformed(format!("cell ({i},{j}) outside grid")));
        }
        let k = g.idx(i, j);
        seen[k] = true;
        for (c, col) in data.iter_mut().enumerate() {
            col[k] = rec[c + 2].trim().parse::<f64>().map_err(|e| GridError::Malformed(e.to_string()))?;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(GridError::Malformed("missing cells".into()));
    }
    let bc = meta.boundary;
    let field = match (meta.kind.as_str(), nc) {
        ("scalar", 1) => AnyField::Scalar(ScalarField { grid: g, bc, values: data.remove(0) }),
        ("vector", 2) => {
            let y = data.pop().unwrap();
            let x = data.pop().unwrap();
            AnyField::Vector(VectorField { grid: g, bc, x, y })
        }
        ("tensor", 2) => {
            let xy = data.pop().unwrap();
            let xx = data.pop().unwrap();
            AnyField::Tensor(TensorField { grid: g, bc, xx, xy })
        }
        (k, n) => return Err(GridError::Malformed(format!("unknown field kind {k} with {n} components"))),
    };
    Ok((meta, field))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(8, 6, 1.0, 0.75).unwrap()
    }

    #[test]
    fn rejects_tiny_grid() {
        assert!(matches!(Grid::new(3, 8, 1.0, 1.0), Err(GridError::TooSmall { .. })));
        assert!(matches!(Grid::new(8, 8, -1.0, 1.0), Err(GridError::BadDomain { .. })));
    }

    #[test]
    fn central_neumann_is_minus_transpose_of_central_dirichlet() {
        let g = grid();
        for axis in AXES {
            for k in 0..g.len() {
                let mut e = vec![0.0; g.len()];
                e[k] = 1.0;
                let a = diff(&g, axis, Stencil::Central, Boundary::Neumann, &e);
                let b = diff_transpose(&g, axis, Stencil::Central, Boundary::Dirichlet, &e);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x + y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn laplacian_of_quadratic_is_constant_in_interior() {
        let g = Grid::unit_square(16).unwrap();
        let u = ScalarField::from_fn(g, Boundary::Neumann, |x, y| x * x + 3.0 * y * y);
        let l = laplacian(&u);
        for j in 1..15 {
            for i in 1..15 {
                assert!((l.values[g.idx(i, j)] - 8.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_is_idempotent_and_solenoidal() {
        let g = grid();
        let v = VectorField::from_components(
            g,
            Boundary::Dirichlet,
            (0..g.len()).map(|k| (k as f64 * 0.37).sin()).collect(),
            (0..g.len()).map(|k| (k as f64 * 0.11).cos()).collect(),
        )
        .unwrap();
        let p = Projector::new(g);
        let pv = p.project(&v).unwrap();
        let ppv = p.project(&pv).unwrap();
        assert!(divergence(&pv).max_abs() < 1e-10);
        let diff: f64 = pv.x.iter().zip(&ppv.x).chain(pv.y.iter().zip(&ppv.y)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }

    #[test]
    fn dump_round_trip() {
        let g = grid();
        let f = AnyField::Tensor(
            TensorField::from_components(
                g,
                Boundary::Neumann,
                (0..g.len()).map(|k| 1.0 / (k as f64 + 3.0)).collect(),
                (0..g.len()).map(|k| (k as f64).exp() * 1e-7).collect(),
            )
            .unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("stress");
        dump_field(&stem, "stress", 0.25, &f).unwrap();
        let (meta, back) = load_field(&stem).unwrap();
        assert_eq!(meta.role, "stress");
        assert_eq!(meta.time, 0.25);
        assert_eq!(back, f);
    }
}
