//! Dense row-major matrices and the handful of kernels the rest of the crate
//! needs: products, Frobenius norms and damped SPD inversion via Cholesky.
//!
//! Every product uses a fixed loop order and a fixed accumulator layout, so
//! repeated calls on identical inputs are bit-identical.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Matrix::from_vec",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("Matrix::from_rows", "equal row lengths", "ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sets one entry. Non-finite values are a programming error.
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(value.is_finite());
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("Matrix::add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("Matrix::sub", other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("Matrix::hadamard", other, |a, b| a * b)
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite(op, Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub(crate) fn add_assign_scaled(&mut self, other: &Matrix, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0.0).count()
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn finite(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Dot product with four interleaved accumulators combined in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · b`, unchecked apart from debug assertions.
pub(crate) fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ci = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik != 0.0 {
                axpy(aik, b.row(k), ci);
            }
        }
    }
    c
}

/// `a · bᵀ`, the shape of a linear layer applied to token-major activations.
pub(crate) fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    matmul(a, &b.transpose())
}

/// `aᵀ · b`.
pub(crate) fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let mut c = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let bk = b.row(k);
        for i in 0..a.cols {
            let aki = a.data[k * a.cols + i];
            if aki != 0.0 {
                axpy(aki, bk, &mut c.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
    }
    c
}

/// Matrix product `a · b`.
pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "gemm",
            format!("a.cols == b.rows ({})", a.cols),
            format!("b.rows = {}", b.rows),
        ));
    }
    finite("gemm", matmul(a, b))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    dot(&m.data, &m.data).sqrt()
}

/// Lower Cholesky factor `L` with `a = L Lᵀ`, or `None` when a pivot is not
/// strictly positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows;
    debug_assert_eq!(n, a.cols);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let pivot = a.get(j, j) - dot(&lj, &lj);
        if !(pivot > 0.0) || !pivot.is_finite() {
            return None;
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let v = (a.get(i, j) - dot(&l.row(i)[..j], &lj)) / d;
            l.set(i, j, v);
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix with positive diagonal.
/// Square-root-free Cholesky `a = L D Lᵀ` with unit lower `L`; `None`
/// unless every pivot is positive.
fn ldl(a: &Matrix) -> Option<(Matrix, Vec<f64>)> {
    let n = a.rows;
    let mut l = Matrix::identity(n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = a.get(j, j);
        for k in 0..j {
            dj -= l.get(j, k) * l.get(j, k) * d[k];
        }
        if !(dj > 0.0) || !dj.is_finite() {
            return None;
        }
        d[j] = dj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k) * d[k];
            }
            l.set(i, j, s / dj);
        }
    }
    Some((l, d))
}

/// Inverse of a unit lower-triangular matrix.
fn unit_lower_inverse(l: &Matrix) -> Matrix {
    let n = l.rows;
    let mut inv = Matrix::identity(n);
    for j in 0..n {
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s += l.get(i, k) * inv.get(k, j);
            }
            inv.set(i, j, -s);
        }
    }
    inv
}

/// `(h + damping · mean(diag h) · I)⁻¹` via the square-root-free Cholesky
/// factorisation `L D Lᵀ`.
///
/// The result is assembled as `L⁻ᵀ D⁻¹ L⁻¹` with a shared summation order
/// for `(i, j)` and `(j, i)`, so it is exactly symmetric, and diagonal
/// inputs invert exactly.
pub fn spd_inverse(h: &Matrix, damping: f64) -> Result<Matrix> {
    spd_inverse_named(h, damping, "matrix")
}

pub(crate) fn spd_inverse_named(h: &Matrix, damping: f64, layer: &str) -> Result<Matrix> {
    let n = h.rows;
    if h.cols != n {
        return Err(Error::dims("spd_inverse", "square matrix", format!("{:?}", h.shape())));
    }
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::InvalidConfig(format!("damping {damping} must be finite and >= 0")));
    }
    let mut damped = h.clone();
    if damping > 0.0 && n > 0 {
        let mean_diag = h.diag().iter().sum::<f64>() / n as f64;
        for i in 0..n {
            let v = damped.get(i, i) + damping * mean_diag;
            damped.set(i, i, v);
        }
    }
    let (l, d) = ldl(&damped).ok_or_else(|| Error::SingularHessian {
        layer: layer.to_string(),
    })?;
    let linv = unit_lower_inverse(&l);
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv.get(k, i) * linv.get(k, j) / d[k];
            }
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    finite("spd_inverse", inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let x = random(n, 2 * n, seed);
        let mut h = matmul_nt(&x, &x);
        for i in 0..n {
            h.set(i, i, h.get(i, i) + 0.1);
        }
        h
    }

    #[test]
    fn gemm_examples() {
        let a = random(3, 3, 1);
        assert_eq!(gemm(&Matrix::identity(3), &a).unwrap(), a);
        assert_eq!(gemm(&a, &Matrix::zeros(3, 2)).unwrap(), Matrix::zeros(3, 2));
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]).unwrap();
        assert_eq!(gemm(&a, &b).unwrap().as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn gemm_rejects_mismatch() {
        let err = gemm(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn transposed_products_agree_with_gemm() {
        let a = random(5, 7, 2);
        let b = random(6, 7, 3);
        let nt = matmul_nt(&a, &b);
        let reference = gemm(&a, &b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&reference) < 1e-14);
        let c = random(5, 4, 4);
        let tn = matmul_tn(&a, &c);
        let reference = gemm(&a.transpose(), &c).unwrap();
        assert!(tn.max_abs_diff(&reference) < 1e-14);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::identity(4)), 2.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 5)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[&[3.0, 4.0]]).unwrap()), 5.0);
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn spd_inverse_examples() {
        assert_eq!(spd_inverse(&Matrix::identity(4), 0.0).unwrap(), Matrix::identity(4));
        let inv = spd_inverse(&Matrix::from_diag(&[2.0, 4.0]), 0.0).unwrap();
        assert_eq!(inv, Matrix::from_diag(&[0.5, 0.25]));
    }

    #[test]
    fn spd_inverse_residual() {
        for seed in 0..10 {
            let h = random_spd(8, seed);
            let inv = spd_inverse(&h, 0.0).unwrap();
            let resid = gemm(&h, &inv).unwrap().sub(&Matrix::identity(8)).unwrap();
            assert!(frobenius_norm(&resid) < 1e-8, "seed {seed}");
            assert_eq!(inv, inv.transpose());
        }
    }

    #[test]
    fn spd_inverse_damping_is_relative_to_mean_diagonal() {
        let h = Matrix::from_diag(&[1.0, 3.0]);
        // mean diag 2, damping 0.5 adds 1.0 to each pivot
        let inv = spd_inverse(&h, 0.5).unwrap();
        assert!((inv.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((inv.get(1, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn spd_inverse_reports_singular() {
        let h = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert!(matches!(spd_inverse(&h, 0.0), Err(Error::SingularHessian { .. })));
        assert!(matches!(spd_inverse(&Matrix::zeros(3, 3), 0.01), Err(Error::SingularHessian { .. })));
        assert!(spd_inverse(&h, 0.01).is_ok());
    }

    #[test]
    fn gemm_is_bit_deterministic() {
        let a = random(17, 13, 9);
        let b = random(13, 11, 10);
        let first = gemm(&a, &b).unwrap();
        for _ in 0..5 {
            assert_eq!(gemm(&a, &b).unwrap().as_slice(), first.as_slice());
        }
    }

    proptest! {
        #[test]
        fn norm_zero_iff_all_zero(data in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let m = Matrix::from_vec(3, 4, data).unwrap();
            let n = frobenius_norm(&m);
            prop_assert!(n >= 0.0);
            prop_assert_eq!(n == 0.0, m.count_zeros() == m.len());
        }

        #[test]
        fn zeroing_an_entry_decreases_norm(
            data in proptest::collection::vec(-5.0f64..5.0, 12),
            idx in 0usize..12,
        ) {
            let m = Matrix::from_vec(3, 4, data).unwrap();
            prop_assume!(m.as_slice()[idx] != 0.0);
            let mut z = m.clone();
            z.as_mut_slice()[idx] = 0.0;
            prop_assert!(frobenius_norm(&z) < frobenius_norm(&m));
        }

        #[test]
        fn spd_inverse_is_an_involution(seed in 0u64..1000, n in 1usize..9) {
            let h = random_spd(n, seed);
            let back = spd_inverse(&spd_inverse(&h, 0.0).unwrap(), 0.0).unwrap();
            for (a, b) in back.as_slice().iter().zip(h.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
            }
        }
    }
}
