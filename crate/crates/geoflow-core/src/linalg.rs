//! Thin wrapper over the sparse LU factorisation, plus iterative refinement
//! against a drifting operator.

use faer::prelude::*;
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, LdltRef, SymbolicCholesky};
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::{Conj, Par, Side};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("sparse assembly failed: {0}")]
    Assembly(String),
    #[error("sparse factorisation failed: {0}")]
    Factorisation(String),
    #[error("linear solve produced non-finite values")]
    NonFinite,
}

/// Collects `(row, col, value)` entries; duplicates are summed on build.
/// Zero values are kept so that the sparsity pattern depends only on the
/// stencil.
#[derive(Clone, Debug, Default)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, val: f64) {
        self.entries.push(Triplet::new(row, col, val));
    }

    pub fn build(&self) -> Result<SparseMatrix, LinalgError> {
        let mat = SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &self.entries)
            .map_err(|e| LinalgError::Assembly(format!("{e:?}")))?;
        Ok(SparseMatrix { mat })
    }
}

#[derive(Clone, Debug)]
pub struct SparseMatrix {
    mat: SparseColMat<usize, f64>,
}

fn to_col(x: &[f64]) -> Mat<f64> {
    Mat::from_fn(x.len(), 1, |i, _| x[i])
}

fn from_col(m: &Mat<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

impl SparseMatrix {
    pub fn nrows(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let y = &self.mat * to_col(x);
        from_col(&y)
    }

    pub fn symbolic(&self) -> Result<SymbolicLu<usize>, LinalgError> {
        SymbolicLu::try_new(self.mat.symbolic()).map_err(|e| LinalgError::Factorisation(format!("{e:?}")))
    }

    /// Numeric LU, reusing `symbolic` when it was computed for the same
    /// sparsity pattern.
    pub fn factor(&self, symbolic: Option<&SymbolicLu<usize>>) -> Result<Factor, LinalgError> {
        let sym = match symbolic {
            Some(s) => s.clone(),
            None => self.symbolic()?,
        };
        let lu = Lu::try_new_with_symbolic(sym, self.mat.as_ref()).map_err(|e| LinalgError::Factorisation(format!("{e:?}")))?;
        Ok(Factor::Lu(lu))
    }

    pub fn symbolic_ldlt(&self) -> Result<Arc<SymbolicCholesky<usize>>, LinalgError> {
        let s = factorize_symbolic_cholesky(self.mat.symbolic(), Side::Lower, Default::default(), Default::default())
            .map_err(|e| LinalgError::Factorisation(format!("{e:?}")))?;
        Ok(Arc::new(s))
    }

    /// `LDL^T` of a symmetric matrix (lower triangle read) with pivots
    /// forced to the given signs. Pivots of the wrong sign or below `delta`
    /// are replaced, so the factor may belong to a perturbed matrix.
    pub fn factor_ldlt(&self, symbolic: Option<&Arc<SymbolicCholesky<usize>>>, signs: &[i8], delta: f64) -> Result<Factor, LinalgError> {
        let sym = match symbolic {
            Some(s) => s.clone(),
            None => self.symbolic_ldlt()?,
        };
        let mut values = vec![0.0; sym.len_val()];
        let par = Par::Seq;
        let mut buf = MemBuffer::try_new(sym.factorize_numeric_ldlt_scratch::<f64>(par, Default::default()))
            .map_err(|e| LinalgError::Factorisation(format!("{e:?}")))?;
        let reg = LdltRegularization { dynamic_regularization_signs: Some(signs), dynamic_regularization_delta: delta, dynamic_regularization_epsilon: delta };
        sym.factorize_numeric_ldlt(&mut values, self.mat.as_ref(), Side::Lower, reg, par, MemStack::new(&mut buf), Default::default())
            .map_err(|e| LinalgError::Factorisation(format!("{e:?}")))?;
        Ok(Factor::Ldlt { symbolic: sym, values, negate_from: None })
    }
}

impl Factor {
    pub fn with_negated_tail(self, from: usize) -> Self {
        match self {
            Factor::Ldlt { symbolic, values, .. } => Factor::Ldlt { symbolic, values, negate_from: Some(from) },
            other => other,
        }
    }
}

pub enum Factor {
    Lu(Lu<usize, f64>),
    /// `negate_from` flips the sign of the trailing right-hand side entries
    /// before solving, for saddle systems whose constraint rows are stored
    /// with the opposite sign of the symmetric form.
    Ldlt { symbolic: Arc<SymbolicCholesky<usize>>, values: Vec<f64>, negate_from: Option<usize> },
}

impl Factor {
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let x = match self {
            Factor::Lu(lu) => from_col(&lu.solve(to_col(b))),
            Factor::Ldlt { symbolic, values, negate_from } => {
                let mut rhs = to_col(b);
                if let Some(k) = *negate_from {
                    for i in k..b.len() {
                        rhs[(i, 0)] = -rhs[(i, 0)];
                    }
                }
                let par = Par::Seq;
                let mut buf = MemBuffer::try_new(symbolic.solve_in_place_scratch::<f64>(1, par))
                    .map_err(|e| LinalgError::Factorisation(format!("{e:?}")))?;
                LdltRef::new(symbolic, values).solve_in_place_with_conj(Conj::No, rhs.as_mut(), par, MemStack::new(&mut buf));
                from_col(&rhs)
            }
        };
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(LinalgError::NonFinite)
        }
    }
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct Refinement {
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `a x = b` by defect correction preconditioned with `factor`, which
/// may belong to a nearby operator. Stops when the max-norm residual drops
/// below `tol * (1 + |b|)`, when it stalls, or after `max_iter` sweeps.
pub fn refine(a: &SparseMatrix, factor: &Factor, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<Refinement, LinalgError> {
    let scale = 1.0 + max_abs(b);
    let mut prev = f64::INFINITY;
    for it in 0..=max_iter {
        let ax = a.matvec(x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let res = max_abs(&r);
        if !res.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        if res <= tol * scale {
            return Ok(Refinement { residual: res / scale, iterations: it, converged: true });
        }
        if it == max_iter || res > 0.5 * prev {
            return Ok(Refinement { residual: res / scale, iterations: it, converged: false });
        }
        prev = res;
        let d = factor.solve(&r)?;
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += di;
        }
    }
    unreachable!()
}

/// Restarted GMRES right-preconditioned with `factor`, which may belong to
/// a nearby operator. Same stopping rule as [`refine`].
pub fn gmres(a: &SparseMatrix, factor: &Factor, b: &[f64], x: &mut [f64], tol: f64, restart: usize, max_iter: usize) -> Result<Refinement, LinalgError> {
    let n = b.len();
    let scale = 1.0 + max_abs(b);
    let dotp = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut total = 0;
    loop {
        let ax = a.matvec(x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let res = max_abs(&r);
        if !res.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        if res <= tol * scale {
            return Ok(Refinement { residual: res / scale, iterations: total, converged: true });
        }
        if total >= max_iter {
            return Ok(Refinement { residual: res / scale, iterations: total, converged: false });
        }
        let beta = dotp(&r, &r).sqrt();
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess: Vec<Vec<f64>> = Vec::new();
        let (mut cs, mut sn): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        let mut g = vec![beta];
        let mut zs: Vec<Vec<f64>> = Vec::new();
        for j in 0..restart.min(max_iter - total) {
            let z = factor.solve(&basis[j])?;
            let mut w = a.matvec(&z);
            zs.push(z);
            let mut col = vec![0.0; j + 2];
            for (i, q) in basis.iter().enumerate() {
                let hij = dotp(&w, q);
                col[i] = hij;
                w.iter_mut().zip(q).for_each(|(wk, qk)| *wk -= hij * qk);
            }
            let wn = dotp(&w, &w).sqrt();
            col[j + 1] = wn;
            for i in 0..j {
                let t = cs[i] * col[i] + sn[i] * col[i + 1];
                col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                col[i] = t;
            }
            let d = col[j].hypot(col[j + 1]);
            let (c, s) = if d == 0.0 { (1.0, 0.0) } else { (col[j] / d, col[j + 1] / d) };
            cs.push(c);
            sn.push(s);
            col[j] = d;
            col[j + 1] = 0.0;
            g.push(-s * g[j]);
            g[j] *= c;
            hess.push(col);
            total += 1;
            // The Euclidean estimate bounds the max-norm residual.
            if g[j + 1].abs() <= 0.1 * tol * scale || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        let m = hess.len();
        let mut y = vec![0.0; m];
        for i in (0..m).rev() {
            let mut acc = g[i];
            for k in i + 1..m {
                acc -= hess[k][i] * y[k];
            }
            y[i] = acc / hess[i][i];
        }
        for (k, z) in zs.iter().enumerate() {
            for i in 0..n {
                x[i] += y[k] * z[i];
            }
        }
    }
}
