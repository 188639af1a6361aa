//! Dense row-major matrices and the symmetric routines the rest of the crate
//! is built on: Cholesky, Jacobi eigendecomposition and the Newton–Schulz
//! matrix square root.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}, jitter {jitter:e})")]
    NotPositiveDefinite { pivot: usize, value: f64, jitter: f64 },
    #[error("{routine} did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence {
        routine: &'static str,
        iters: usize,
        residual: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Jitter escalation ladder for Cholesky: start value, then decades up to
/// `max_jitter`.
pub const JITTER_FLOOR: f64 = 1e-10;
pub const DEFAULT_MAX_JITTER: f64 = 1e-6;
pub const DEFAULT_SQRT_ITERS: usize = 25;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>12.6} ", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
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

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
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

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    /// An `n x 1` column.
    pub fn column(values: Vec<T>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    /// A `1 x 1` matrix.
    pub fn scalar(value: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape (`rows * cols` must be unchanged).
    pub fn reshaped(self, rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, self.data)
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

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Value of a `1 x 1` matrix (or the first entry).
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
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

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Self::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul row mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t column mismatch");
        Self::from_fn(self.rows, other.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(other.row(j))
                .map(|(&a, &b)| a * b)
                .sum()
        })
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_diag(&self, c: T) -> Self {
        let mut m = self.clone();
        for i in 0..m.rows.min(m.cols) {
            m[(i, i)] += c;
        }
        m
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square());
        let half = lit::<T>(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)]) * half
        })
    }

    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| (k / self.cols, k % self.cols))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Relative Frobenius distance `‖a − b‖ / ‖reference‖`.
pub fn rel_frobenius<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, reference: &Matrix<T>) -> T {
    let denom = reference.frobenius_norm();
    let num = a.sub(b).frobenius_norm();
    if denom == T::zero() {
        num
    } else {
        num / denom
    }
}

fn ensure_square<T: Scalar>(a: &Matrix<T>) -> Result<()> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    Ok(())
}

/// Verifies the SPD-matrix contract: finite entries and symmetry within
/// `1e-10 · max|A|`. Returns the symmetrized matrix.
pub fn assert_spd_input<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    ensure_square(a)?;
    if let Some((i, j)) = a.first_non_finite() {
        return Err(LinalgError::NonFinite(i, j));
    }
    let tol = (lit::<T>(1e-10).max(T::epsilon() * lit(64.0))) * a.max_abs();
    let asym = a.max_asymmetry();
    if asym > tol {
        return Err(LinalgError::NotSymmetric(asym.as_f64()));
    }
    Ok(a.symmetrize())
}

/// Lower Cholesky factor together with the jitter that was actually applied.
#[derive(Debug, Clone)]
pub struct Cholesky<T: Scalar> {
    pub factor: Matrix<T>,
    pub jitter: T,
}

fn cholesky_once<T: Scalar>(a: &Matrix<T>, jitter: T) -> Result<Matrix<T>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= T::zero() || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: j,
                value: d.as_f64(),
                jitter: jitter.as_f64(),
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky with jitter escalation: tries `jitter`, then decades starting at
/// `1e-10` (or `10·jitter`) until `max_jitter` is exceeded.
pub fn cholesky_escalating<T: Scalar>(
    a: &Matrix<T>,
    jitter: T,
    max_jitter: T,
) -> Result<Cholesky<T>> {
    let a = assert_spd_input(a)?;
    let mut current = jitter;
    loop {
        match cholesky_once(&a, current) {
            Ok(factor) => {
                return Ok(Cholesky {
                    factor,
                    jitter: current,
                })
            }
            Err(e) => {
                let next = if current < lit(JITTER_FLOOR) {
                    lit(JITTER_FLOOR)
                } else {
                    current * lit(10.0)
                };
                if next > max_jitter * lit(1.000_001) {
                    return Err(e);
                }
                current = next;
            }
        }
    }
}

/// Lower factor `L` with `L·Lᵀ = a + jitter·I` (jitter escalated up to
/// `1e-6` if the first attempt fails).
pub fn cholesky<T: Scalar>(a: &Matrix<T>, jitter: T) -> Result<Matrix<T>> {
    let max = jitter.max(lit(DEFAULT_MAX_JITTER));
    cholesky_escalating(a, jitter, max).map(|c| c.factor)
}

/// Solves `L·x = b` for lower-triangular `L`, column by column.
pub fn solve_lower<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_upper_t<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `(L·Lᵀ)·x = b`.
pub fn cholesky_solve<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    solve_upper_t(l, &solve_lower(l, b))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
#[derive(Debug, Clone)]
pub struct SymEigen<T: Scalar> {
    /// Descending.
    pub values: Vec<T>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: Matrix<T>,
}

impl<T: Scalar> SymEigen<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.values.len();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * self.values[k] * self.vectors[(j, k)])
                .sum()
        })
    }

    /// `V·diag(f(w))·Vᵀ`.
    pub fn apply(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.values.len();
        let fw: Vec<T> = self.values.iter().map(|&w| f(w)).collect();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * fw[k] * self.vectors[(j, k)])
                .sum()
        })
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

pub fn sym_eigen<T: Scalar>(a: &Matrix<T>) -> Result<SymEigen<T>> {
    let mut m = assert_spd_input(a)?;
    let n = m.rows();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let tol = T::epsilon() * scale;
    let mut off = T::zero();
    for sweep in 0..=JACOBI_MAX_SWEEPS {
        off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        off = off.sqrt();
        if off <= tol || scale == T::zero() {
            break;
        }
        if sweep == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                routine: "sym_eigen",
                iters: sweep,
                residual: off.as_f64(),
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (lit::<T>(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let _ = off;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values = order.iter().map(|&k| m[(k, k)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// Square root through the eigendecomposition, negative eigenvalues clamped
/// to zero. Not differentiable; used as a reference.
pub fn sqrt_spd_eigen<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let eig = sym_eigen(a)?;
    Ok(eig.apply(|w| w.max(T::zero()).sqrt()).symmetrize())
}

/// One coupled Newton–Schulz update on the trace-normalized operand:
/// `T = 1.5·I − 0.5·Z·Y`, `Y ← Y·T`, `Z ← T·Z`.
fn newton_schulz_step<T: Scalar>(y: &Matrix<T>, z: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let t = z.matmul(y).scale(lit(-0.5)).add_diag(lit(1.5));
    (y.matmul(&t), t.matmul(z))
}

/// Matrix square root by `iters` coupled Newton–Schulz steps on `A/tr(A)`,
/// rescaled by `√tr(A)`. Fails with `NoConvergence` if `‖S·S − A‖/‖A‖`
/// exceeds the precision's iterative tolerance.
pub fn sqrt_spd<T: Scalar>(a: &Matrix<T>, iters: usize) -> Result<Matrix<T>> {
    let a = assert_spd_input(a)?;
    let s = sqrt_spd_unchecked(&a, iters);
    let norm = a.frobenius_norm();
    if norm == T::zero() {
        return Ok(s);
    }
    let residual = rel_frobenius(&s.matmul(&s), &a, &a);
    if !(residual <= T::iterative_tol()) {
        return Err(LinalgError::NoConvergence {
            routine: "sqrt_spd",
            iters,
            residual: residual.as_f64(),
        });
    }
    Ok(s)
}

/// Newton–Schulz square root without input validation or a residual check.
/// The arithmetic is identical to the graph-recorded version in
/// [`crate::autodiff::Graph::sqrt_spd`].
pub fn sqrt_spd_unchecked<T: Scalar>(a: &Matrix<T>, iters: usize) -> Matrix<T> {
    let n = a.rows();
    let tr = a.trace();
    if tr <= T::zero() {
        return Matrix::zeros(n, n);
    }
    let mut y = a.map(|v| v / tr);
    let mut z = Matrix::identity(n);
    for _ in 0..iters {
        let (ny, nz) = newton_schulz_step(&y, &z);
        y = ny;
        z = nz;
    }
    y.scale(tr.sqrt()).symmetrize()
}
