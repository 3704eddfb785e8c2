//! Small dense row-major matrices and the Cholesky routines the GP code needs.
//!
//! Sizes here are tens of rows (inducing grids, per-signal observation
//! counts), so nothing is blocked or vectorised.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_slice(rows: usize, cols: usize, values: &[T]) -> Self {
        assert_eq!(values.len(), rows * cols, "shape mismatch");
        Self {
            rows,
            cols,
            data: values.to_vec(),
        }
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let src = rhs.row(k);
                let dst = out.row_mut(i);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn tr_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "tr_matmul shape mismatch");
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = self.row(k);
            let rhs_row = rhs.row(k);
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let dst = out.row_mut(i);
                for (d, &s) in dst.iter_mut().zip(rhs_row) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "tr_matvec shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn add_diagonal(&mut self, v: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&a| a * a).sum()
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = self`. Only the lower triangle is read.
    pub fn cholesky(&self) -> Result<Self> {
        assert_eq!(self.rows, self.cols, "cholesky of non-square matrix");
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: d.to_f64_lossy(),
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(l)
    }

    /// Zero the strict upper triangle.
    pub fn lower_triangle(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            if j <= i {
                self[(i, j)]
            } else {
                T::zero()
            }
        })
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Solve `L X = B` in place for lower-triangular `L`.
pub fn solve_lower_in_place<T: Scalar>(l: &Matrix<T>, b: &mut Matrix<T>) {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == T::zero() {
                continue;
            }
            let (head, tail) = b.data.split_at_mut(i * b.cols);
            let src = &head[k * b.cols..(k + 1) * b.cols];
            for (d, &s) in tail[..b.cols].iter_mut().zip(src) {
                *d -= lik * s;
            }
        }
        let inv = T::one() / l[(i, i)];
        for d in b.row_mut(i) {
            *d *= inv;
        }
    }
}

/// Solve `Lᵀ X = B` in place for lower-triangular `L`.
pub fn solve_upper_tr_in_place<T: Scalar>(l: &Matrix<T>, b: &mut Matrix<T>) {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki == T::zero() {
                continue;
            }
            let (head, tail) = b.data.split_at_mut(k * b.cols);
            let src = &tail[..b.cols];
            for (d, &s) in head[i * b.cols..(i + 1) * b.cols].iter_mut().zip(src) {
                *d -= lki * s;
            }
        }
        let inv = T::one() / l[(i, i)];
        for d in b.row_mut(i) {
            *d *= inv;
        }
    }
}

pub fn solve_lower_vec<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

pub fn solve_upper_tr_vec<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// `(L Lᵀ)⁻¹ b`.
pub fn cholesky_solve_vec<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    solve_upper_tr_vec(l, &solve_lower_vec(l, b))
}

/// `(L Lᵀ)⁻¹ B`.
pub fn cholesky_solve<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut x = b.clone();
    solve_lower_in_place(l, &mut x);
    solve_upper_tr_in_place(l, &mut x);
    x
}

/// `(L Lᵀ)⁻¹`.
pub fn cholesky_inverse<T: Scalar>(l: &Matrix<T>) -> Matrix<T> {
    cholesky_solve(l, &Matrix::identity(l.rows()))
}

/// `ln det(L Lᵀ)`.
pub fn cholesky_log_det<T: Scalar>(l: &Matrix<T>) -> T {
    let two = T::lit(2.0);
    l.diagonal().into_iter().map(|d| two * d.ln()).sum()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Matrix<f64> {
        let a = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5 + if i == j { 0.3 } else { 0.0 });
        let mut s = a.tr_matmul(&a);
        s.add_diagonal(0.5);
        s
    }

    #[test]
    fn cholesky_reconstructs() {
        let s = spd(6);
        let l = s.cholesky().unwrap();
        let back = l.matmul(&l.transpose());
        assert!(back.sub(&s).max_abs() < 1e-12);
    }

    #[test]
    fn triangular_solves_invert() {
        let s = spd(5);
        let l = s.cholesky().unwrap();
        let inv = cholesky_inverse(&l);
        let id = s.matmul(&inv);
        assert!(id.sub(&Matrix::identity(5)).max_abs() < 1e-10);

        let b = vec![1.0, -2.0, 0.5, 3.0, 0.0];
        let x = cholesky_solve_vec(&l, &b);
        let bx = s.matvec(&x);
        for (u, v) in bx.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(m.cholesky(), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn log_det_matches_product_of_pivots() {
        let s = Matrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = s.cholesky().unwrap();
        assert!((cholesky_log_det(&l) - 8.0f64.ln()).abs() < 1e-14);
    }
}
