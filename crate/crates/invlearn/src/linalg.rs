//! Dense symmetric linear algebra: Jacobi eigendecomposition, pseudoinverse
//! least squares and Cholesky solves.
//!
//! Everything downstream (filter application, normal equations, Gauss-Newton
//! steps) reduces to symmetric matrices of moderate dimension, so a cyclic
//! Jacobi sweep is accurate enough and keeps the crate dependency-free.

use thiserror::Error;

/// Relative symmetry tolerance accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative eigenvalue cutoff used by [`solve_least_squares`] by default.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

const JACOBI_SWEEP_CAP: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {gap:.3e}")]
    NonSymmetric { i: usize, j: usize, gap: f64 },
    #[error("Jacobi iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("dimension mismatch: matrix is {dim}x{dim}, vector has length {len}")]
    DimensionMismatch { dim: usize, len: usize },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Dense symmetric matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    /// Builds a matrix from row-major entries, verifying symmetry up to
    /// `SYMMETRY_TOL` relative error.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self, LinalgError> {
        assert_eq!(entries.len(), dim * dim, "entry buffer must be dim*dim");
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = entries[i * dim + j];
                let b = entries[j * dim + i];
                let gap = (a - b).abs();
                if gap > SYMMETRY_TOL * f64::max(1.0, a.abs()) {
                    return Err(LinalgError::NonSymmetric { i, j, gap });
                }
            }
        }
        Ok(Self { dim, entries })
    }

    /// Builds the matrix with entries `f(i, j)`; only the upper triangle is
    /// evaluated and mirrored, so symmetry holds by construction.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                entries[i * dim + j] = v;
                entries[j * dim + i] = v;
            }
        }
        Self { dim, entries }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let dim = values.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, v) in values.iter().enumerate() {
            entries[i * dim + i] = *v;
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.entries[i * self.dim..(i + 1) * self.dim];
            out[i] = dot(row, v);
        }
        out
    }

    /// Quadratic form `v' M v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(&self.matvec(v), v)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    fn frobenius(&self) -> f64 {
        dot(&self.entries, &self.entries).sqrt()
    }
}

/// Eigendecomposition `M = V diag(w) V'` with eigenvalues sorted descending
/// and orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    dim: usize,
    /// Descending eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// Column-major eigenvectors: column k is `vectors[k*dim..(k+1)*dim]`.
    vectors: Vec<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// `V' v` — coordinates of `v` in the eigenbasis.
    pub fn to_eigenbasis(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        (0..self.dim).map(|k| dot(self.eigenvector(k), v)).collect()
    }

    /// `V c` — back from eigenbasis coordinates.
    pub fn from_eigenbasis(&self, c: &[f64]) -> Vec<f64> {
        assert_eq!(c.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for k in 0..self.dim {
            axpy(c[k], self.eigenvector(k), &mut out);
        }
        out
    }

    /// Applies `V diag(f(w)) V'` to `v`.
    pub fn apply_function(&self, v: &[f64], mut f: impl FnMut(f64) -> f64) -> Vec<f64> {
        let mut c = self.to_eigenbasis(v);
        for (ck, w) in c.iter_mut().zip(&self.eigenvalues) {
            *ck *= f(*w);
        }
        self.from_eigenbasis(&c)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Rotations sweep the strict upper triangle until the off-diagonal Frobenius
/// norm falls below `1e-12` relative to the input norm, with a hard cap of
/// 100 sweeps.
pub fn sym_eigendecompose(m: &SymMatrix) -> Result<EigenDecomposition, LinalgError> {
    let n = m.dim;
    let mut a = m.entries.clone();
    // V starts as identity, accumulated column-major.
    let mut v = vec![0.0; n * n];
    for k in 0..n {
        v[k * n + k] = 1.0;
    }

    let scale = m.frobenius();
    if scale > 0.0 {
        let tol = JACOBI_OFF_TOL * scale;
        let mut converged = false;
        for _sweep in 0..JACOBI_SWEEP_CAP {
            if off_fro(&a, n) <= tol {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= tol / (n as f64) {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    // Classic stable rotation computation.
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    // Rotate the eigenvector columns p and q.
                    let (vp_off, vq_off) = (p * n, q * n);
                    for k in 0..n {
                        let vkp = v[vp_off + k];
                        let vkq = v[vq_off + k];
                        v[vp_off + k] = c * vkp - s * vkq;
                        v[vq_off + k] = s * vkp + c * vkq;
                    }
                }
            }
        }
        if !converged && off_fro(&a, n) > tol {
            return Err(LinalgError::NoConvergence(JACOBI_SWEEP_CAP));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigs: Vec<f64> = (0..n).map(|k| a[k * n + k]).collect();
    order.sort_by(|&i, &j| eigs[j].partial_cmp(&eigs[i]).expect("finite eigenvalues"));

    let eigenvalues: Vec<f64> = order.iter().map(|&k| eigs[k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        vectors[dst * n..(dst + 1) * n].copy_from_slice(&v[src * n..(src + 1) * n]);
    }

    Ok(EigenDecomposition { dim: n, eigenvalues, vectors })
}

fn off_fro(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = a[i * n + j];
            s += 2.0 * x * x;
        }
    }
    s.sqrt()
}

/// Minimum-norm least-squares solution `M^+ rhs` of a positive semidefinite
/// system. Eigenvalues at or below `rank_tol` times the largest eigenvalue
/// are treated as zero.
pub fn solve_least_squares(
    m: &SymMatrix,
    rhs: &[f64],
    rank_tol: f64,
) -> Result<Vec<f64>, LinalgError> {
    if rhs.len() != m.dim {
        return Err(LinalgError::DimensionMismatch { dim: m.dim, len: rhs.len() });
    }
    let eig = sym_eigendecompose(m)?;
    let w_max = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = rank_tol * w_max;
    Ok(eig.apply_function(rhs, |w| if w > cutoff && w > 0.0 { 1.0 / w } else { 0.0 }))
}

/// Cholesky factor of a symmetric positive definite matrix.
///
/// Used for shifted solves `(M + lambda I) x = b` on the hot paths where a
/// full eigendecomposition would be wasteful.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    // Lower triangle, row-major.
    l: Vec<f64>,
}

impl Cholesky {
    pub fn new(m: &SymMatrix, shift: f64) -> Result<Self, LinalgError> {
        let n = m.dim;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = m.get(i, j) + if i == j { shift } else { 0.0 };
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(LinalgError::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { dim: n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim);
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }
}

// Small vector helpers shared across the crate.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
