//! Dense matrix primitives underlying whitening: mean, covariance, Cholesky
//! factorization, triangular inversion and the whitening transform itself.
//! All functions are pure; whitening statistics are always computed in f64.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("operation on an empty matrix")]
    Empty,
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("non-positive pivot at index {pivot} during Cholesky factorization (value {value:.3e}); degenerate batch")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("zero diagonal entry at index {index} in triangular inverse")]
    ZeroDiagonal { index: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major matrix, the universal numeric carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "rows*cols must match data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (idx, x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(LinalgError::NonFinite { row: idx / self.cols, col: idx % self.cols });
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs) {
                    *d = *d + a * b;
                }
            }
        }
        out
    }

    /// self * other^T without materializing the transpose.
    pub fn matmul_transpose_b(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_transpose_b inner dims");
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = T::zero();
                for k in 0..self.cols {
                    acc = acc + self[(i, k)] * other[(j, k)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shapes");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.cast_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a.cast_f64() - b.cast_f64()).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::cast_from(x.cast_f64())).collect(),
        }
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Per-sub-batch whitening statistics: mean, covariance, Cholesky factor and
/// its inverse, plus the ridge actually added to the diagonal.
#[derive(Debug, Clone)]
pub struct WhiteningStats {
    pub mu: Vec<f64>,
    pub sigma: Matrix<f64>,
    pub chol: Matrix<f64>,
    pub w: Matrix<f64>,
    pub ridge_used: f64,
}

/// Column means of a K x k batch.
pub fn mean_rows<T: Scalar>(v: &Matrix<T>) -> Result<Vec<T>> {
    if v.rows() == 0 || v.cols() == 0 {
        return Err(LinalgError::Empty);
    }
    let inv_k = T::cast_from(1.0 / v.rows() as f64);
    let mut mu = vec![T::zero(); v.cols()];
    for i in 0..v.rows() {
        for (m, &x) in mu.iter_mut().zip(v.row(i)) {
            *m = *m + x;
        }
    }
    for m in &mut mu {
        *m = *m * inv_k;
    }
    Ok(mu)
}

/// Unbiased covariance (1/(K-1) normalization) of a K x k batch around `mu`.
pub fn covariance<T: Scalar>(v: &Matrix<T>, mu: &[T]) -> Result<Matrix<T>> {
    let (big_k, k) = v.shape();
    if big_k < 2 {
        return Err(LinalgError::TooFewRows { needed: 2, got: big_k });
    }
    assert_eq!(mu.len(), k, "mean length");
    let mut sigma = Matrix::zeros(k, k);
    let mut centered = vec![T::zero(); k];
    for i in 0..big_k {
        for (c, (&x, &m)) in centered.iter_mut().zip(v.row(i).iter().zip(mu)) {
            *c = x - m;
        }
        for a in 0..k {
            let ca = centered[a];
            for b in a..k {
                sigma[(a, b)] = sigma[(a, b)] + ca * centered[b];
            }
        }
    }
    let norm = T::cast_from(1.0 / (big_k - 1) as f64);
    for a in 0..k {
        for b in a..k {
            let val = sigma[(a, b)] * norm;
            sigma[(a, b)] = val;
            sigma[(b, a)] = val;
        }
    }
    Ok(sigma)
}

/// Cholesky factorization of (S + S^T)/2 + ridge*I, lower-triangular result.
pub fn cholesky(s: &Matrix<f64>, ridge: f64) -> Result<Matrix<f64>> {
    let (rows, cols) = s.shape();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    // Symmetrize first to absorb floating-point asymmetry.
    let mut a = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = 0.5 * (s[(i, j)] + s[(j, i)]);
        }
        a[(i, i)] = a[(i, i)] + ridge;
    }
    let mut l = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for p in 0..j {
                sum -= l[(i, p)] * l[(j, p)];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite { pivot: i, value: sum });
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn lower_tri_inverse(l: &Matrix<f64>) -> Result<Matrix<f64>> {
    let (rows, cols) = l.shape();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    for i in 0..n {
        if l[(i, i)] == 0.0 {
            return Err(LinalgError::ZeroDiagonal { index: i });
        }
    }
    let mut w = Matrix::<f64>::zeros(n, n);
    for j in 0..n {
        w[(j, j)] = 1.0 / l[(j, j)];
        for i in j + 1..n {
            let mut sum = 0.0;
            for p in j..i {
                sum += l[(i, p)] * w[(p, j)];
            }
            w[(i, j)] = -sum / l[(i, i)];
        }
    }
    Ok(w)
}

/// Default ridge: 1e-6 times the mean covariance diagonal.
pub fn default_ridge(sigma: &Matrix<f64>) -> f64 {
    let n = sigma.rows();
    if n == 0 {
        return 0.0;
    }
    let trace: f64 = (0..n).map(|i| sigma[(i, i)]).sum();
    1e-6 * trace / n as f64
}

/// Whiten a K x k batch: z_i = W (v_i - mu) with W = L^-1 from the Cholesky
/// factor of the covariance. Statistics are computed in f64 whatever T is.
/// A negative `ridge` requests the default data-scaled ridge.
pub fn whiten_batch<T: Scalar>(v: &Matrix<T>, ridge: f64) -> Result<(Matrix<T>, WhiteningStats)> {
    let (big_k, k) = v.shape();
    if big_k < 2 {
        return Err(LinalgError::TooFewRows { needed: 2, got: big_k });
    }
    v.check_finite()?;
    let v64: Matrix<f64> = v.cast();
    let mu = mean_rows(&v64)?;
    let sigma = covariance(&v64, &mu)?;
    let ridge_used = if ridge < 0.0 { default_ridge(&sigma) } else { ridge };
    let chol = cholesky(&sigma, ridge_used)?;
    let w = lower_tri_inverse(&chol)?;
    let mut z = Matrix::<f64>::zeros(big_k, k);
    let mut centered = vec![0.0f64; k];
    for i in 0..big_k {
        for (c, (&x, &m)) in centered.iter_mut().zip(v64.row(i).iter().zip(&mu)) {
            *c = x - m;
        }
        for a in 0..k {
            let mut acc = 0.0;
            for b in 0..=a {
                acc += w[(a, b)] * centered[b];
            }
            z[(i, a)] = acc;
        }
    }
    Ok((z.cast(), WhiteningStats { mu, sigma, chol, w, ridge_used }))
}
