//! Minimal sparse (CSR) kernels and the iterative/direct solvers built on them.
//!
//! Everything here is deterministic: matvecs and reductions run in a fixed
//! index order, so repeated solves with identical inputs are bit-identical.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Compressed sparse row matrix over `f64`.
#[derive(Debug, Clone)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    /// Build from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &mut Vec<(usize, usize, f64)>) -> Csr {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in triplets.iter() {
            debug_assert!(r < nrows && c < ncols);
            if prev == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                prev = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Csr { nrows, ncols, indptr, indices, data }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Entries of row `r` as `(col, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |k| (self.indices[k], self.data[k]))
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.data[k] * x[self.indices[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x without forming the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.indptr[r]..self.indptr[r + 1] {
                y[self.indices[k]] += self.data[k] * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Csr {
        let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                trips.push((self.indices[k], r, self.data[k]));
            }
        }
        Csr::from_triplets(self.ncols, self.nrows, &mut trips)
    }

    /// C = self * other.
    pub fn matmul(&self, other: &Csr) -> Csr {
        assert_eq!(self.ncols, other.nrows, "matmul shape mismatch");
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let mid = self.indices[k];
                let a = self.data[k];
                for k2 in other.indptr[mid]..other.indptr[mid + 1] {
                    trips.push((r, other.indices[k2], a * other.data[k2]));
                }
            }
        }
        Csr::from_triplets(self.nrows, other.ncols, &mut trips)
    }

    /// Keep only the columns with `col_map[c] != usize::MAX`, renumbering them
    /// to `col_map[c]`. Dropped columns correspond to constrained DOFs pinned
    /// to zero.
    pub fn restrict_cols(&self, col_map: &[usize], n_new: usize) -> Csr {
        assert_eq!(col_map.len(), self.ncols);
        let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = col_map[self.indices[k]];
                if c != usize::MAX {
                    trips.push((r, c, self.data[k]));
                }
            }
        }
        Csr::from_triplets(self.nrows, n_new, &mut trips)
    }

    /// Multiply row r by s[r] in place.
    pub fn scale_rows(&mut self, s: &[f64]) {
        assert_eq!(s.len(), self.nrows);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                self.data[k] *= s[r];
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[k])] += self.data[k];
            }
        }
        m
    }

    /// Accumulate `self^T * diag(w) * self` into a dense matrix.
    pub fn add_gram_to(&self, w: &[f64], out: &mut DMatrix<f64>) {
        assert_eq!(w.len(), self.nrows);
        assert_eq!(out.nrows(), self.ncols);
        assert_eq!(out.ncols(), self.ncols);
        for r in 0..self.nrows {
            let wr = w[r];
            if wr == 0.0 {
                continue;
            }
            for k1 in self.indptr[r]..self.indptr[r + 1] {
                let c1 = self.indices[k1];
                let v1 = self.data[k1] * wr;
                for k2 in self.indptr[r]..self.indptr[r + 1] {
                    out[(c1, self.indices[k2])] += v1 * self.data[k2];
                }
            }
        }
    }
}

/// Dense Cholesky factor of a symmetric positive definite matrix, used both as
/// a CG preconditioner and as the direct-solve oracle on small systems.
pub struct DenseChol {
    chol: Cholesky<f64, Dyn>,
    n: usize,
}

impl DenseChol {
    pub fn new(m: DMatrix<f64>) -> Result<DenseChol> {
        let n = m.nrows();
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::SolveFailure("matrix not positive definite".into()))?;
        Ok(DenseChol { chol, n })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(rhs.len(), self.n);
        let v = DVector::from_column_slice(rhs);
        self.chol.solve(&v).as_slice().to_vec()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a (preconditioned) conjugate gradient solve.
pub struct CgResult {
    pub x: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
    /// Relative residual after each iteration.
    pub history: Vec<f64>,
}

/// Preconditioned conjugate gradient for SPD operators given as closures.
///
/// Stops when `||b - Ax|| / ||b|| <= tol`. `apply_m_inv` must apply an SPD
/// preconditioner inverse; pass `|r| r.to_vec()` for plain CG.
pub fn pcg<A, M>(
    apply_a: A,
    apply_m_inv: M,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> CgResult
where
    A: Fn(&[f64]) -> Vec<f64>,
    M: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return CgResult { x: vec![0.0; n], iters: 0, converged: true, history: vec![] };
    }
    let mut x = x0.to_vec();
    let ax = apply_a(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut history = Vec::new();
    if norm2(&r) / bnorm <= tol {
        return CgResult { x, iters: 0, converged: true, history };
    }
    let mut z = apply_m_inv(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        let ap = apply_a(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            // loss of positive definiteness in finite precision
            return CgResult { x, iters: it - 1, converged: false, history };
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm2(&r) / bnorm;
        history.push(rel);
        if rel <= tol {
            return CgResult { x, iters: it, converged: true, history };
        }
        z = apply_m_inv(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgResult { x, iters: max_iter, converged: false, history }
}
