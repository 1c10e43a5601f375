//! Dense `f64` vectors and matrices with the handful of symmetric-matrix
//! routines the moment and Fisher oracles need: covariance estimation,
//! cyclic Jacobi eigendecomposition, eigen-based inversion and square roots,
//! and the spectral norm by power iteration.

use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as zero by the inverse routines.
pub const PD_THRESHOLD: f64 = 1e-10;

/// A non-empty vector of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("Vec64 needs at least one entry"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Vec64 entry {i} is {}", data[i])));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len >= 1, "Vec64 length must be positive");
        Self(vec![0.0; len])
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        assert!(len >= 1, "Vec64 length must be positive");
        Self((0..len).map(f).collect())
    }

    /// Builds without the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self(data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vec64) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Vec64 {
        Vec64(self.0.iter().map(|v| v * s).collect())
    }

    pub fn sub(&self, other: &Vec64) -> Result<Vec64> {
        check_len(self.len(), other.len())?;
        Ok(Vec64(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &Vec64) -> Result<Vec64> {
        check_len(self.len(), other.len())?;
        Ok(Vec64(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// As a `1 × len` row matrix.
    pub fn to_row(&self) -> Mat64 {
        Mat64 {
            rows: 1,
            cols: self.len(),
            data: self.0.clone(),
        }
    }

    /// As a `len × 1` column matrix.
    pub fn to_col(&self) -> Mat64 {
        Mat64 {
            rows: self.len(),
            cols: 1,
            data: self.0.clone(),
        }
    }
}

impl Deref for Vec64 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vec64::new(v)
    }
}

impl From<Vec64> for Vec<f64> {
    fn from(v: Vec64) -> Self {
        v.0
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat64 {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("Mat64 needs positive dimensions"));
        }
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Mat64 entry {i} is {}", data[i])));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "Mat64 dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in diag.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec_unchecked(rows, cols, data)
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput("no rows"))?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Mat64::new(rows.len(), cols, data)
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Mat64 {
        Mat64::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Mat64) -> Result<Mat64> {
        check_len(self.cols, other.rows)?;
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let orow = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Mat64::from_vec_unchecked(self.rows, other.cols, out))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, v.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ v`.
    pub fn tmatvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += m * vr;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Mat64) -> Result<Mat64> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat64) -> Result<Mat64> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Mat64, f: impl Fn(f64, f64) -> f64) -> Result<Mat64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Mat64::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scaled(&self, s: f64) -> Mat64 {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat64 {
        Mat64::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|v| f(*v)).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat64) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Mat64> {
        self.require_square()?;
        Ok(Mat64::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        }))
    }

    pub fn symmetry_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    fn require_square(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    /// Entry-wise finiteness check, for results of unchecked arithmetic.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Mat64 {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat64 {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Second-moment matrix of the samples, `(1/n) Σ (v − v̄)(v − v̄)ᵀ` when
/// `center` is set and the uncentered `(1/n) Σ v vᵀ` otherwise.
pub fn covariance(samples: &[Vec64], center: bool) -> Result<Mat64> {
    let first = samples
        .first()
        .ok_or(Error::EmptyInput("covariance of zero samples"))?;
    let d = first.len();
    for s in samples {
        check_len(d, s.len())?;
    }
    let n = samples.len() as f64;
    let mean = if center {
        let mut m = vec![0.0; d];
        for s in samples {
            for (acc, v) in m.iter_mut().zip(s.iter()) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    } else {
        vec![0.0; d]
    };
    let mut acc = Mat64::zeros(d, d);
    let mut dev = vec![0.0; d];
    for s in samples {
        for ((o, v), m) in dev.iter_mut().zip(s.iter()).zip(&mean) {
            *o = v - m;
        }
        for i in 0..d {
            for j in 0..=i {
                acc[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = acc[(i, j)] / n;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    Ok(acc)
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors in
/// the columns of `eigenvectors`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenResult {
    pub eigenvalues: Vec64,
    pub eigenvectors: Mat64,
}

impl EigenResult {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty")
    }

    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Mat64 {
        let v = &self.eigenvectors;
        let n = v.rows();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|l| f(*l)).collect();
        let mut out = Mat64::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for (k, fk) in fl.iter().enumerate() {
                    s += v[(i, k)] * fk * v[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Cyclic Jacobi eigensolver. The input is symmetrized first; asymmetry
/// beyond `1e-9` (relative to the largest entry) is rejected.
pub fn sym_eigen(m: &Mat64) -> Result<EigenResult> {
    m.require_square()?;
    let n = m.rows();
    let scale = m
        .as_slice()
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1.0);
    if m.symmetry_error() > 1e-9 * scale {
        return Err(Error::NotSymmetric(m.symmetry_error()));
    }
    let mut a = m.symmetrized()?;
    let mut v = Mat64::identity(n);
    let total = a.frobenius_norm();
    let budget = 100 * n * n;
    let mut converged = n == 1;
    for _sweep in 0..budget {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
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
    if !converged {
        return Err(Error::NoConvergence("Jacobi sweep budget exhausted"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = Vec64::from_vec_unchecked(order.iter().map(|&i| a[(i, i)]).collect());
    let eigenvectors = Mat64::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
    })
}

/// `(M + ridge·I)⁻¹` through the eigendecomposition. Never regularizes on its
/// own: a shifted spectrum at or below [`PD_THRESHOLD`] is an error.
pub fn ridge_inverse(m: &Mat64, ridge: f64) -> Result<Mat64> {
    assert!(ridge >= 0.0, "ridge must be non-negative");
    let eig = sym_eigen(m)?;
    let lo = eig.min_eigenvalue() + ridge;
    if lo <= PD_THRESHOLD {
        return Err(Error::SingularMatrix {
            min_eigenvalue: eig.min_eigenvalue(),
        });
    }
    Ok(eig.spectral_map(|l| 1.0 / (l + ridge)))
}

/// `M^{-1/2}` for symmetric positive-definite `M`.
pub fn inv_sqrt(m: &Mat64) -> Result<Mat64> {
    let eig = sym_eigen(m)?;
    if eig.min_eigenvalue() <= PD_THRESHOLD {
        return Err(Error::SingularMatrix {
            min_eigenvalue: eig.min_eigenvalue(),
        });
    }
    Ok(eig.spectral_map(|l| 1.0 / l.sqrt()))
}

/// `M^{1/2}` for symmetric positive semi-definite `M`; tiny negative
/// eigenvalues from rounding are clamped to zero.
pub fn sqrt_psd(m: &Mat64) -> Result<Mat64> {
    let eig = sym_eigen(m)?;
    let scale = eig.max_eigenvalue().abs().max(1.0);
    if eig.min_eigenvalue() < -1e-10 * scale {
        return Err(Error::NotPsd(eig.min_eigenvalue()));
    }
    Ok(eig.spectral_map(|l| l.max(0.0).sqrt()))
}

/// Largest singular value by power iteration on the smaller Gram matrix.
///
/// Stops once the Rayleigh quotient changes by less than `1e-9` relative;
/// restarts from a fresh random vector when an iterate collapses.
pub fn operator_norm<R: Rng + ?Sized>(m: &Mat64, rng: &mut R) -> Result<f64> {
    if m.as_slice().iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let at = m.transpose();
    let (gram, dim) = if m.cols() <= m.rows() {
        (at.matmul(m)?, m.cols())
    } else {
        (m.matmul(&at)?, m.rows())
    };
    let budget = 10 * (m.rows() + m.cols());
    let fresh = |rng: &mut R| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        normalized(v)
    };
    let mut x = fresh(rng);
    let mut prev = f64::NAN;
    for _ in 0..budget {
        let y = gram.matvec(&x)?;
        let lambda = dot(&x, &y);
        let ny = dot(&y, &y).sqrt();
        if ny <= f64::MIN_POSITIVE || !ny.is_finite() {
            x = fresh(rng);
            prev = f64::NAN;
            continue;
        }
        if prev.is_finite() && (lambda - prev).abs() <= 1e-9 * lambda.abs().max(f64::MIN_POSITIVE) {
            return Ok(lambda.max(0.0).sqrt());
        }
        prev = lambda;
        x = y.into_iter().map(|v| v / ny).collect();
    }
    Err(Error::NoConvergence("power iteration budget exhausted"))
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}
