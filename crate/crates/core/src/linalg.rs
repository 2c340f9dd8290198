//! Small dense row-major matrices and the Cholesky machinery the block
//! covariance code is built on.

use std::ops::{Index, IndexMut};

use crate::scalar::{dot, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
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

    /// Builds a matrix from row-major storage. Panics if the length does not
    /// match `rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector.
    pub fn column(values: &[T]) -> Self {
        Self::from_row_major(values.len(), 1, values.to_vec())
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
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn col_values(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * *b;
                }
            }
        }
        out
    }

    /// `self * rhsᵀ`, both operands read row-wise.
    pub fn matmul_transposed(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_transposed shape mismatch");
        Self::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    /// `selfᵀ * rhs`.
    pub fn transposed_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "transposed_matmul shape mismatch");
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, a) in a_row.iter().enumerate() {
                if *a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += *a * *b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn transposed_matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "transposed_matvec shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += *a * *vi;
            }
        }
        out
    }

    pub fn add_diagonal(&mut self, value: T) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += value;
        }
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn sub_assign(&mut self, rhs: &Self) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Frobenius inner product `Σ a_ij b_ij`.
    pub fn frobenius_dot(&self, rhs: &Self) -> T {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        dot(&self.data, &rhs.data)
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> T {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies `src` into the block starting at (`row`, `col`).
    pub fn set_block(&mut self, row: usize, col: usize, src: &Self) {
        assert!(row + src.rows <= self.rows && col + src.cols <= self.cols);
        for i in 0..src.rows {
            let dst = &mut self.data[(row + i) * self.cols + col..(row + i) * self.cols + col + src.cols];
            dst.copy_from_slice(src.row(i));
        }
    }

    pub fn block(&self, row: usize, col: usize, rows: usize, cols: usize) -> Self {
        assert!(row + rows <= self.rows && col + cols <= self.cols);
        Self::from_fn(rows, cols, |i, j| self[(row + i, col + j)])
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_row_major(idx.len(), self.cols, data)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |i, j| self[(i, idx[j])])
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
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

/// Returned when a matrix handed to [`Cholesky::factor`] is not numerically
/// positive definite. `pivot` is the first failing diagonal position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors a symmetric matrix, reading only its lower triangle.
    pub fn factor(a: &Matrix<T>) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.rows(), a.cols(), "Cholesky of a non-square matrix");
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                if i == j {
                    if !(s > T::zero()) || !s.is_finite() {
                        return Err(NotPositiveDefinite { pivot: i });
                    }
                    l[(i, i)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn factor_matrix(&self) -> &Matrix<T> {
        &self.l
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        for i in 0..n {
            let s = x[i] - dot(&self.l.row(i)[..i], &x[..i]);
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let xi = x[i] / self.l[(i, i)];
            x[i] = xi;
            let row = self.l.row(i);
            for k in 0..i {
                x[k] -= row[k] * xi;
            }
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solves `L X = B` for a row-major right-hand side.
    pub fn solve_lower_matrix(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n);
        let mut x = b.clone();
        let m = b.cols();
        let mut acc = vec![T::zero(); m];
        for i in 0..n {
            acc.copy_from_slice(x.row(i));
            let li = self.l.row(i);
            for k in 0..i {
                let lik = li[k];
                if lik == T::zero() {
                    continue;
                }
                for (a, xk) in acc.iter_mut().zip(x.row(k)) {
                    *a -= lik * *xk;
                }
            }
            let inv = T::one() / li[i];
            for (dst, a) in x.row_mut(i).iter_mut().zip(&acc) {
                *dst = *a * inv;
            }
        }
        x
    }

    /// Solves `Lᵀ X = B` for a row-major right-hand side.
    pub fn solve_upper_matrix(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n);
        let mut x = b.clone();
        let m = b.cols();
        let mut xi = vec![T::zero(); m];
        for i in (0..n).rev() {
            let inv = T::one() / self.l[(i, i)];
            for (v, src) in xi.iter_mut().zip(x.row(i)) {
                *v = *src * inv;
            }
            x.row_mut(i).copy_from_slice(&xi);
            let li = self.l.row(i);
            for k in 0..i {
                let lik = li[k];
                if lik == T::zero() {
                    continue;
                }
                for (dst, v) in x.row_mut(k).iter_mut().zip(&xi) {
                    *dst -= lik * *v;
                }
            }
        }
        x
    }

    pub fn solve_matrix(&self, b: &Matrix<T>) -> Matrix<T> {
        self.solve_upper_matrix(&self.solve_lower_matrix(b))
    }

    /// `log |A|`.
    pub fn log_det(&self) -> T {
        (0..self.dim())
            .map(|i| self.l[(i, i)].ln())
            .fold(T::zero(), |a, b| a + b)
            * T::lit(2.0)
    }

    /// `xᵀ A⁻¹ x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        let z = self.solve_lower(x);
        dot(&z, &z)
    }

    /// Explicit inverse `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let linv = self.solve_lower_matrix(&Matrix::identity(n));
        // A⁻¹ = Σ_k (row k of L⁻¹)ᵀ (row k of L⁻¹); L⁻¹ is lower triangular.
        let mut out = Matrix::zeros(n, n);
        for k in 0..n {
            let r = &linv.row(k)[..=k];
            for (i, ri) in r.iter().enumerate() {
                let dst = &mut out.row_mut(i)[..=k];
                for (d, rj) in dst.iter_mut().zip(r) {
                    *d += *ri * *rj;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Matrix<f64> {
        let a = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + if i == j { 1.0 } else { 0.0 });
        let mut s = a.matmul_transposed(&a);
        s.add_diagonal(n as f64);
        s
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd(6);
        let c = Cholesky::factor(&a).unwrap();
        let l = c.factor_matrix();
        let back = l.matmul_transposed(l);
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn solves_agree_with_inverse() {
        let a = spd(7);
        let c = Cholesky::factor(&a).unwrap();
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let x = c.solve(&b);
        let ax = a.matvec(&x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
        let inv = c.inverse();
        let id = a.matmul(&inv);
        assert!(id.max_abs_diff(&Matrix::identity(7)) < 1e-10);

        let rhs = Matrix::from_fn(7, 3, |i, j| (i + 2 * j) as f64);
        let xs = c.solve_matrix(&rhs);
        assert!(a.matmul(&xs).max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(Cholesky::factor(&a).unwrap_err().pivot, 1);
    }

    #[test]
    fn log_det_of_diagonal() {
        let mut a = Matrix::<f64>::identity(3);
        a[(0, 0)] = 2.0;
        a[(2, 2)] = 5.0;
        let c = Cholesky::factor(&a).unwrap();
        assert!((c.log_det() - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn products_agree() {
        let a = Matrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64) * 0.5);
        let b = Matrix::from_fn(3, 2, |i, j| (i * j) as f64 + 1.0);
        let direct = a.transpose().matmul(&b);
        assert!(a.transposed_matmul(&b).max_abs_diff(&direct) < 1e-14);
        let v = [1.0, -1.0, 2.0];
        let tv = a.transposed_matvec(&v);
        let dv = a.transpose().matvec(&v);
        assert_eq!(tv, dv);
    }
}
