//! Dense matrices, Cholesky factorization and PSD solves.
//!
//! The `f64` routines back the public API. The generic `*_generic` variants
//! operate on flat row-major slices of any [`Real`] so that the same
//! factorization can be differentiated on a tape.

use crate::autodiff::Real;
use crate::error::{GpnError, Result};
use serde::{Deserialize, Serialize};

/// Default starting jitter for kernel matrices.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Number of tenfold jitter escalations after `jitter0` (up to `1e6 * jitter0`).
const JITTER_ESCALATIONS: i32 = 6;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GpnError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GpnError::DimensionMismatch("ragged rows".into()));
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, x) in d.iter().enumerate() {
            m[(i, i)] = *x;
        }
        m
    }

    pub fn column(v: &[f64]) -> Self {
        DenseMatrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(GpnError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(GpnError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `(A + A^T) / 2` plus `jitter` on the diagonal.
    pub fn symmetrized(&self, jitter: f64) -> Result<Self> {
        if !self.is_square() {
            return Err(GpnError::DimensionMismatch("symmetrize needs a square matrix".into()));
        }
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = 0.5 * (self[(i, j)] + self[(j, i)]);
            }
            out[(i, i)] += jitter;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    lower: DenseMatrix,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.lower
            .matmul(&self.lower.transpose())
            .expect("square factor")
    }

    /// `log |L L^T|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `(L L^T)^{-1}`.
    pub fn inverse(&self) -> DenseMatrix {
        chol_solve(self, &DenseMatrix::identity(self.dim())).expect("square factor")
    }
}

/// Factorizes a symmetric positive definite matrix.
pub fn cholesky(a: &DenseMatrix) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(GpnError::DimensionMismatch(format!(
            "Cholesky of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let lower = cholesky_generic(a.as_slice(), n, 0.0)?;
    Ok(CholeskyFactor {
        lower: DenseMatrix::from_vec(n, n, lower)?,
    })
}

/// Cholesky of `a + jitter * I` for the smallest jitter in
/// `{0, jitter0, 10 jitter0, ..., 1e6 jitter0}` that succeeds.
pub fn jittered_cholesky(a: &DenseMatrix, jitter0: f64) -> Result<(CholeskyFactor, f64)> {
    if !a.is_square() {
        return Err(GpnError::DimensionMismatch("jittered Cholesky needs a square matrix".into()));
    }
    let n = a.rows();
    let (lower, jitter) = jittered_cholesky_generic(a.as_slice(), n, jitter0)?;
    Ok((
        CholeskyFactor {
            lower: DenseMatrix::from_vec(n, n, lower)?,
        },
        jitter,
    ))
}

/// Solves `(L L^T) x = b` column by column.
pub fn chol_solve(factor: &CholeskyFactor, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = factor.dim();
    if b.rows() != n {
        return Err(GpnError::DimensionMismatch(format!(
            "factor of size {n} against right-hand side with {} rows",
            b.rows()
        )));
    }
    let mut x = DenseMatrix::zeros(n, b.cols());
    for j in 0..b.cols() {
        let col = chol_solve_vec_generic(factor.lower.as_slice(), n, &b.col(j));
        for i in 0..n {
            x[(i, j)] = col[i];
        }
    }
    Ok(x)
}

/// Generic Cholesky of the row-major `n x n` matrix `a + jitter * I`.
pub fn cholesky_generic<T: Real>(a: &[T], n: usize, jitter: f64) -> Result<Vec<T>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![T::cst(0.0); n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        if j > 0 {
            d = d - T::dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
        }
        if !(d.val() > 0.0) || !d.val().is_finite() {
            return Err(GpnError::NotPositiveDefinite {
                pivot: j,
                value: d.val(),
            });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            if j > 0 {
                s = s - T::dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Generic jitter escalation; see [`jittered_cholesky`].
pub fn jittered_cholesky_generic<T: Real>(
    a: &[T],
    n: usize,
    jitter0: f64,
) -> Result<(Vec<T>, f64)> {
    if let Ok(l) = cholesky_generic(a, n, 0.0) {
        return Ok((l, 0.0));
    }
    let mut jitter = jitter0;
    for k in 0..=JITTER_ESCALATIONS {
        jitter = jitter0 * 10f64.powi(k);
        if let Ok(l) = cholesky_generic(a, n, jitter) {
            return Ok((l, jitter));
        }
    }
    Err(GpnError::JitterExhausted { last_jitter: jitter })
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_subst_generic<T: Real>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut y: Vec<T> = Vec::with_capacity(n);
    for i in 0..n {
        let s = if i > 0 {
            b[i] - T::dot(&l[i * n..i * n + i], &y[..i])
        } else {
            b[i]
        };
        y.push(s / l[i * n + i]);
    }
    y
}

/// Solves `L^T x = y` for lower-triangular `L`.
pub fn backward_subst_generic<T: Real>(l: &[T], n: usize, y: &[T]) -> Vec<T> {
    let mut x = vec![T::cst(0.0); n];
    let mut col = Vec::with_capacity(n);
    for i in (0..n).rev() {
        col.clear();
        col.extend((i + 1..n).map(|k| l[k * n + i]));
        let s = if i + 1 < n {
            y[i] - T::dot(&col, &x[i + 1..])
        } else {
            y[i]
        };
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solves `(L L^T) x = b` for a single right-hand side.
pub fn chol_solve_vec_generic<T: Real>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let y = forward_subst_generic(l, n, b);
    backward_subst_generic(l, n, &y)
}

/// `(L L^T)^{-1}` as a row-major `n x n` matrix.
pub fn chol_inverse_generic<T: Real>(l: &[T], n: usize) -> Vec<T> {
    let mut inv = vec![T::cst(0.0); n * n];
    let mut e = vec![T::cst(0.0); n];
    for j in 0..n {
        e.iter_mut().for_each(|x| *x = T::cst(0.0));
        e[j] = T::cst(1.0);
        let col = chol_solve_vec_generic(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // Exact symmetry keeps downstream quadratic forms consistent.
    for i in 0..n {
        for j in 0..i {
            let s = (inv[i * n + j] + inv[j * n + i]) * 0.5;
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

/// Row-major product of `a` (`n x k`) and `b` (`k x m`).
pub fn matmul_generic<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let bt: Vec<T> = (0..m)
        .flat_map(|j| (0..k).map(move |p| (j, p)))
        .map(|(j, p)| b[p * m + j])
        .collect();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(T::dot(&a[i * k..(i + 1) * k], &bt[j * k..(j + 1) * k]));
        }
    }
    out
}
