//! Small dense row-major matrices and a Cholesky factorization.
//!
//! The models here only ever factor M×M systems with M around a dozen, so a
//! straightforward implementation is all that is needed.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Validation(format!(
                    "ragged rows: row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero-width chunks
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (k, &j) in idx.iter().enumerate() {
                out[(i, k)] = self[(i, j)];
            }
        }
        out
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

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Self {
        let m = self.cols;
        let mut g = Self::zeros(m, m);
        for r in self.row_iter() {
            for a in 0..m {
                let ra = r[a];
                if ra == T::zero() {
                    continue;
                }
                for b in a..m {
                    g.data[a * m + b] = g.data[a * m + b] + ra * r[b];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                g.data[a * m + b] = g.data[b * m + a];
            }
        }
        g
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &vi) in self.row_iter().zip(v) {
            for (o, &x) in out.iter_mut().zip(r) {
                *o = *o + x * vi;
            }
        }
        out
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.cols);
        self.row_iter().map(|r| dot(r, v)).collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn add_diagonal(&mut self, v: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] = self[(i, i)] + v;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cholesky<T> {
    lower: Matrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn new(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        if n != a.cols() {
            return Err(Error::Numerical(format!("cholesky of non-square {}x{} matrix", n, a.cols())));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d = d - l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                let diag: Vec<f64> = (0..n).map(|i| a[(i, i)].as_f64()).collect();
                let max = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                return Err(Error::Numerical(format!(
                    "matrix not positive definite: pivot {j} = {d}; diagonal range [{min:e}, {max:e}]"
                )));
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { lower: l })
    }

    /// Rebuilds a factorization from a stored lower factor.
    pub fn from_lower(lower: Matrix<T>) -> Result<Self> {
        if lower.rows() != lower.cols() {
            return Err(Error::Validation("cholesky factor must be square".into()));
        }
        for i in 0..lower.rows() {
            if !(lower[(i, i)] > T::zero()) {
                return Err(Error::Validation(format!("cholesky factor has non-positive pivot at {i}")));
            }
        }
        Ok(Cholesky { lower })
    }

    pub fn lower(&self) -> &Matrix<T> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Solves `L x = b`.
    pub fn forward(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let l = &self.lower;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s = s - l[(i, k)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn backward(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let l = &self.lower;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s = s - l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.backward(&self.forward(b))
    }

    /// `ln |A|`.
    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.dim()).map(|i| two * self.lower[(i, i)].ln()).sum()
    }

    /// `vᵀ A⁻¹ v`.
    pub fn inv_quad(&self, v: &[T]) -> T {
        let w = self.forward(v);
        dot(&w, &w)
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    /// `tr(A⁻¹) = ‖L⁻¹‖_F²`.
    pub fn trace_inverse(&self) -> T {
        let n = self.dim();
        let mut e = vec![T::zero(); n];
        let mut tr = T::zero();
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[j] = T::one();
            let w = self.forward(&e);
            tr = tr + dot(&w, &w);
        }
        tr
    }

    /// Reconstructs `A = L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.lower.matmul(&self.lower.transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd() -> Matrix<f64> {
        Matrix::from_rows(&[vec![4.0, 2.0, 0.6], vec![2.0, 5.0, 1.0], vec![0.6, 1.0, 3.0]]).unwrap()
    }

    #[test]
    fn cholesky_reconstructs_and_solves() {
        let a = spd();
        let c = Cholesky::new(&a).unwrap();
        assert!(c.reconstruct().max_abs_diff(&a) < 1e-14);
        let b = [1.0, -2.0, 0.5];
        let x = c.solve(&b);
        let ax = a.matvec(&x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-13);
        }
        let prod = a.matmul(&c.inverse());
        assert!(prod.max_abs_diff(&Matrix::identity(3)) < 1e-13);
        let inv = c.inverse();
        let tr: f64 = (0..3).map(|i| inv[(i, i)]).sum();
        assert!((tr - c.trace_inverse()).abs() < 1e-14);
        assert!((c.inv_quad(&b) - dot(&b, &inv.matvec(&b))).abs() < 1e-13);
    }

    #[test]
    fn log_det_matches_expansion() {
        let a = spd();
        let det = 4.0 * (5.0 * 3.0 - 1.0) - 2.0 * (2.0 * 3.0 - 0.6) + 0.6 * (2.0 - 5.0 * 0.6);
        let c = Cholesky::new(&a).unwrap();
        assert!((c.log_det() - f64::ln(det)).abs() < 1e-13);
    }

    #[test]
    fn non_pd_is_reported() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let err = Cholesky::new(&a).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("diagonal range"));
    }

    #[test]
    fn gram_matches_matmul() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]]).unwrap();
        assert!(x.gram().max_abs_diff(&x.transpose().matmul(&x)) < 1e-15);
        assert_eq!(x.t_matvec(&[1.0, 1.0, 1.0]), vec![4.0, 1.5]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Matrix::<f64>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
