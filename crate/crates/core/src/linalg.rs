//! Small dense linear algebra: row-major matrices, Householder thin QR,
//! Cholesky, a Jacobi symmetric eigensolver, and matrix-free conjugate
//! gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::math;

/// Dense real matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
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

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::from_vec",
                expected: format!("{} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product. Panics on inner-dimension mismatch; use
    /// [`Matrix::try_matmul`] where the shapes come from user input.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn try_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("{} rows on the right", self.cols),
                found: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(self.matmul(other))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_matvec dimension");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy_slice(vi, self.row(i), &mut out);
        }
        out
    }

    pub fn scaled(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn scale_mut(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// `self += a · other`.
    pub fn add_scaled(&mut self, a: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy_slice(a, &other.data, &mut self.data);
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(1.0, other);
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.frobenius_dot(self))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(math::abs(*x)))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square() && (0..self.rows).all(|i| (0..i).all(|j| math::abs(self[(i, j)] - self[(j, i)]) <= tol))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

/// `y += a · x`.
#[inline]
pub fn axpy_slice(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Thin Householder QR of an `m × r` matrix with `r ≤ m`.
///
/// Returns `(Q, R)` with `Q` of shape `m × r` (orthonormal columns) and `R`
/// upper triangular `r × r`. No sign convention is applied here.
pub fn householder_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, r) = a.shape();
    if r > m {
        return Err(Error::ShapeMismatch {
            op: "householder_qr",
            expected: format!("cols <= rows ({m})"),
            found: format!("{r} cols"),
        });
    }
    let mut work = a.clone();
    // Householder vectors v_j (length m - j), stored with unit leading entry scaling.
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(r);
    for j in 0..r {
        let x: Vec<f64> = (j..m).map(|i| work[(i, j)]).collect();
        let alpha = norm(&x);
        let mut v = x.clone();
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let tau = 2.0 / vnorm2;
        // work[j.., j..] -= tau v (vᵀ work[j.., j..])
        for c in j..r {
            let s: f64 = (j..m).map(|i| v[i - j] * work[(i, c)]).sum();
            let f = tau * s;
            for i in j..m {
                work[(i, c)] -= f * v[i - j];
            }
        }
        reflectors.push((v, tau));
    }
    let rmat = Matrix::from_fn(r, r, |i, j| if j >= i { work[(i, j)] } else { 0.0 });
    // Q = H_0 H_1 ... H_{r-1} [I_r; 0]
    let mut q = Matrix::from_fn(m, r, |i, j| if i == j { 1.0 } else { 0.0 });
    for j in (0..r).rev() {
        let (v, tau) = &reflectors[j];
        if *tau == 0.0 {
            continue;
        }
        for c in 0..r {
            let s: f64 = (j..m).map(|i| v[i - j] * q[(i, c)]).sum();
            let f = tau * s;
            for i in j..m {
                q[(i, c)] -= f * v[i - j];
            }
        }
    }
    Ok((q, rmat))
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::ShapeMismatch {
                op: "cholesky",
                expected: "square matrix".into(),
                found: format!("{}x{}", a.rows(), a.cols()),
            });
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) {
                return Err(crate::error::invalid("matrix", "not symmetric positive definite"));
            }
            let djj = math::sqrt(d);
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let s = y[i] - dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for (k, yk) in y.iter().enumerate().skip(i + 1) {
                s -= self.l[(k, i)] * yk;
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim());
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let x = self.solve_vec(&b.column(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_symmetric(1e-12 * (1.0 + a.max_abs())) {
        return Err(crate::error::invalid("matrix", "not symmetric"));
    }
    let n = a.rows();
    let mut w = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| w[(i, j)] * w[(i, j)])
            .sum();
        if off <= 1e-30 * (1.0 + w.frobenius_dot(&w)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (w[(q, q)] - w[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = w[(k, p)];
                    let akq = w[(k, q)];
                    w[(k, p)] = c * akp - s * akq;
                    w[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[(p, k)];
                    let aqk = w[(q, k)];
                    w[(p, k)] = c * apk - s * aqk;
                    w[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| w[(i, i)]).collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    Ok(eig)
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final `‖b − A x‖`.
    pub residual: f64,
}

/// Matrix-free conjugate gradients for symmetric positive definite `A`.
///
/// Stops when `‖b − A x‖ ≤ tol` (absolute). Returns
/// [`Error::NonConvergence`] carrying the last residual otherwise.
pub fn conjugate_gradient<F>(
    mut apply: F,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut iterations = 0;
    while math::sqrt(rs) > tol {
        if iterations >= max_iter {
            return Err(Error::NonConvergence {
                solver: "conjugate gradient",
                iterations,
                residual: math::sqrt(rs),
            });
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NonConvergence {
                solver: "conjugate gradient",
                iterations,
                residual: math::sqrt(rs),
            });
        }
        let step = rs / pap;
        axpy_slice(step, &p, &mut x);
        axpy_slice(-step, &ap, &mut r);
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
        iterations += 1;
        // Recompute the true residual periodically to avoid drift.
        if iterations % 50 == 0 {
            let ax = apply(&x);
            for ((ri, bi), ai) in r.iter_mut().zip(b).zip(&ax) {
                *ri = bi - ai;
            }
            rs = dot(&r, &r);
        }
    }
    Ok(CgSolution {
        x,
        iterations,
        residual: math::sqrt(rs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_matrix() -> Matrix {
        Matrix::from_rows(&[&[2.0, -1.0, 0.5], &[0.3, 4.0, 1.0], &[1.0, 0.0, 3.0], &[-2.0, 1.5, 0.2]])
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let a = test_matrix();
        let (q, r) = householder_qr(&a).unwrap();
        assert_eq!(q.shape(), (4, 3));
        let qtq = q.t_matmul(&q);
        assert!(qtq.sub(&Matrix::identity(3)).max_abs() < 1e-14);
        assert!(q.matmul(&r).sub(&a).max_abs() < 1e-13);
        for i in 0..3 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_rejects_wide_input() {
        assert!(householder_qr(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_rows(&[&[4.0, 1.0, 0.0], &[1.0, 3.0, 0.5], &[0.0, 0.5, 2.0]]);
        let c = Cholesky::new(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = c.solve_vec(&b);
        let ax = a.matvec(&x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
        assert!(Cholesky::new(&Matrix::diag(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-13 && (e[1] - 3.0).abs() < 1e-13);
        assert!(symmetric_eigenvalues(&Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]])).is_err());
    }

    #[test]
    fn cg_matches_direct_solve_and_reports_nonconvergence() {
        let a = Matrix::from_rows(&[&[4.0, 1.0, 0.0], &[1.0, 3.0, 0.5], &[0.0, 0.5, 2.0]]);
        let b = [1.0, 2.0, 3.0];
        let sol = conjugate_gradient(|v| a.matvec(v), &b, None, 1e-13, 100).unwrap();
        let direct = Cholesky::new(&a).unwrap().solve_vec(&b);
        for (u, v) in sol.x.iter().zip(&direct) {
            assert!((u - v).abs() < 1e-12);
        }
        let err = conjugate_gradient(|v| a.matvec(v), &b, None, 1e-13, 1).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 1, .. }));
    }
}
