//! Small dense-matrix arithmetic and symmetric eigenvalues.
//!
//! Supports the mixing matrices (D x D, D <= 64) and model matrices
//! (M x C with M up to ~1e5) the engines need. Two properties are part of the
//! crate's determinism contract and drive the implementation:
//!
//! - row-major `f64` storage with a fixed left-to-right accumulation order in
//!   [`DenseMatrix::matmul`], so repeated runs are bit-identical;
//! - eigenvalues by cyclic Jacobi rotations, capped at 100 sweeps, converging
//!   to an off-diagonal Frobenius norm below `1e-12 * max(1, ||A||_F)`.
//!   (The tolerance is scaled because an absolute 1e-12 sits below f64
//!   round-off for matrices with norms in the hundreds.)
//!
//! The non-symmetric matrices the mixing construction needs (`L * Omega^-1`)
//! are never fed to the eigensolver directly; callers use the similarity
//! transform `Omega^-1/2 L Omega^-1/2`, which has the same spectrum and is
//! symmetric. [`DenseMatrix::operator_norm`] goes through `A^T A`.

use crate::{Error, Result};

/// Row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

/// Eigenvalues of a symmetric matrix, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// `eigenvalues[0]` is the largest.
    pub eigenvalues: Vec<f64>,
}

impl Spectrum {
    /// Largest eigenvalue.
    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// i-th largest eigenvalue (0-based).
    pub fn nth(&self, i: usize) -> f64 {
        self.eigenvalues[i]
    }
}

/// Sweep cap for the Jacobi iteration; exceeding it is a hard error.
pub const JACOBI_MAX_SWEEPS: usize = 100;

impl DenseMatrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds from a generator called in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        DenseMatrix {
            rows,
            cols,
            entries,
        }
    }

    /// Wraps a row-major entry vector.
    pub fn from_vec(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Config(format!(
                "entry vector has length {} but {rows} x {cols} needs {}",
                entries.len(),
                rows * cols
            )));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Raw row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    /// Column `j` copied out.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Overwrites column `j`.
    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows, "column length must match row count");
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    /// Matrix product with deterministic left-to-right accumulation: entry
    /// (i, j) is the sum over k = 0, 1, ... in that order.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch(
                self.rows, self.cols, other.rows, other.cols,
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.entries[i * self.cols + k] * other.entries[k * other.cols + j];
                }
                out.entries[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// Matrix-vector product (same accumulation order as [`Self::matmul`]).
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::DimMismatch(self.rows, self.cols, v.len(), 1));
        }
        Ok((0..self.rows)
            .map(|i| {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.entries[i * self.cols + k] * v[k];
                }
                acc
            })
            .collect())
    }

    /// Transpose.
    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Entry-wise difference.
    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch(
                self.rows, self.cols, other.rows, other.cols,
            ));
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            entries,
        })
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Largest entry magnitude.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.abs()))
    }

    /// Largest entry-wise difference to `other` (matrices must be congruent).
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.entries
            .iter()
            .zip(&other.entries)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// # Errors
    ///
    /// [`Error::NotSymmetric`] if any entry pair differs by more than
    /// `1e-9 * max(1, max_abs)`; [`Error::JacobiStalled`] if the off-diagonal
    /// norm has not dropped below `1e-12 * max(1, ||A||_F)` after
    /// [`JACOBI_MAX_SWEEPS`] sweeps (never observed for orders <= 64).
    pub fn sym_eigenvalues(&self) -> Result<Spectrum> {
        if self.rows != self.cols {
            return Err(Error::DimMismatch(self.rows, self.cols, self.cols, self.rows));
        }
        let n = self.rows;
        let sym_tol = 1e-9 * self.max_abs().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let delta = (self[(i, j)] - self[(j, i)]).abs();
                if delta > sym_tol {
                    return Err(Error::NotSymmetric { i, j, delta });
                }
            }
        }

        let mut a = self.clone();
        // Work on the exactly-symmetrized copy so rotations preserve symmetry.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (a[(i, j)] + a[(j, i)]);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }

        let off_tol = 1e-12 * a.frobenius_norm().max(1.0);
        let mut converged = false;
        for _sweep in 0..JACOBI_MAX_SWEEPS {
            if a.off_diagonal_norm() <= off_tol {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    a.jacobi_rotate(p, q);
                }
            }
        }
        if !converged && a.off_diagonal_norm() > off_tol {
            return Err(Error::JacobiStalled(JACOBI_MAX_SWEEPS));
        }

        let mut eigenvalues: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        eigenvalues.sort_by(|x, y| y.partial_cmp(x).expect("eigenvalues are finite"));
        Ok(Spectrum { eigenvalues })
    }

    /// Operator (spectral) norm: `sqrt(lambda_max(A^T A))`.
    pub fn operator_norm(&self) -> Result<f64> {
        let gram = self.transpose().matmul(self)?;
        // A^T A is symmetric up to round-off; the eigensolver symmetrizes.
        let spectrum = gram.sym_eigenvalues()?;
        Ok(spectrum.max().max(0.0).sqrt())
    }

    fn off_diagonal_norm(&self) -> f64 {
        let n = self.rows;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += self[(i, j)] * self[(i, j)];
                }
            }
        }
        acc.sqrt()
    }

    /// One symmetric Jacobi rotation zeroing entry (p, q).
    fn jacobi_rotate(&mut self, p: usize, q: usize) {
        let apq = self[(p, q)];
        if apq.abs() < 1e-300 {
            return;
        }
        let tau = (self[(q, q)] - self[(p, p)]) / (2.0 * apq);
        let t = if tau >= 0.0 {
            1.0 / (tau + (1.0 + tau * tau).sqrt())
        } else {
            1.0 / (tau - (1.0 + tau * tau).sqrt())
        };
        let c = 1.0 / (1.0 + t * t).sqrt();
        let s = t * c;
        let n = self.rows;
        for k in 0..n {
            let akp = self[(k, p)];
            let akq = self[(k, q)];
            self[(k, p)] = c * akp - s * akq;
            self[(k, q)] = s * akp + c * akq;
        }
        for k in 0..n {
            let apk = self[(p, k)];
            let aqk = self[(q, k)];
            self[(p, k)] = c * apk - s * aqk;
            self[(q, k)] = s * apk + c * aqk;
        }
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.entries[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.entries[i * self.cols + j]
    }
}
