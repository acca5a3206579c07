//! Small dense matrices (dimension at most [`MAX_DIM`]) stored inline.

use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 4;

/// Relative eigenvalue threshold used by [`pseudoinverse`] when no other is given.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Relative tolerance for clamping slightly negative eigenvalues.
pub const PSD_TOL: f64 = 1e-12;

const SYM_LEN: usize = MAX_DIM * (MAX_DIM + 1) / 2;

#[inline]
fn tri(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * (2 * n - i + 1) / 2 + (j - i)
}

/// Symmetric matrix with only the upper triangle stored (row-major).
#[derive(Clone, Copy, PartialEq)]
pub struct SymMatrix {
    n: usize,
    upper: [f64; SYM_LEN],
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymMatrix[")?;
        for i in 0..self.n {
            if i > 0 {
                f.write_str("; ")?;
            }
            for j in 0..self.n {
                if j > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{:?}", self.get(i, j))?;
            }
        }
        f.write_str("]")
    }
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "dimension {n} unsupported");
        SymMatrix { n, upper: [0.0; SYM_LEN] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scalar(n, 1.0)
    }

    pub fn scalar(n: usize, c: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, c);
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &x) in d.iter().enumerate() {
            m.set(i, i, x);
        }
        m
    }

    /// Builds from a function evaluated on the upper triangle only.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Builds from a row-major `n*n` slice; fails unless it is exactly symmetric and finite.
    pub fn from_full(n: usize, full: &[f64]) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&n) {
            return Err(Error::Unsupported("matrix dimension must be 1..=4"));
        }
        if full.len() != n * n {
            return Err(Error::Shape { expected: "n*n entries", found: full.len() });
        }
        if full.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        for i in 0..n {
            for j in 0..i {
                if full[i * n + j] != full[j * n + i] {
                    return Err(Error::InvalidMatrix);
                }
            }
        }
        Ok(Self::from_fn(n, |i, j| full[i * n + j]))
    }

    /// Builds from the packed upper triangle.
    pub fn from_upper(n: usize, upper: &[f64]) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&n) {
            return Err(Error::Unsupported("matrix dimension must be 1..=4"));
        }
        if upper.len() != n * (n + 1) / 2 {
            return Err(Error::Shape { expected: "n(n+1)/2 entries", found: upper.len() });
        }
        if upper.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        let mut m = Self::zeros(n);
        m.upper[..upper.len()].copy_from_slice(upper);
        Ok(m)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[tri(self.n, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.upper[tri(self.n, i, j)] = v;
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper[..self.n * (self.n + 1) / 2]
    }

    pub fn is_finite(&self) -> bool {
        self.upper().iter().all(|x| x.is_finite())
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n, other.n);
        let mut m = *self;
        for (a, b) in m.upper.iter_mut().zip(other.upper.iter()) {
            *a += b;
        }
        m
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n, other.n);
        let mut m = *self;
        for (a, b) in m.upper.iter_mut().zip(other.upper.iter()) {
            *a -= b;
        }
        m
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut m = *self;
        for a in m.upper.iter_mut() {
            *a *= c;
        }
        m
    }

    /// `self + c * other`
    pub fn axpy(&self, c: f64, other: &Self) -> Self {
        let mut m = *self;
        for (a, b) in m.upper.iter_mut().zip(other.upper.iter()) {
            *a += c * b;
        }
        m
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            s += self.get(i, i) * other.get(i, i);
            for j in i + 1..n {
                s += 2.0 * self.get(i, j) * other.get(i, j);
            }
        }
        s
    }

    pub fn norm_fro(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn to_rect(&self) -> RectMatrix {
        RectMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `self * m`
    pub fn mul_rect(&self, m: &RectMatrix) -> RectMatrix {
        debug_assert_eq!(self.n, m.rows);
        RectMatrix::from_fn(self.n, m.cols, |i, j| (0..self.n).map(|l| self.get(i, l) * m.get(l, j)).sum())
    }

    /// `b^T self b` for a vector `b`.
    pub fn quad(&self, b: &[f64]) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            s += self.get(i, i) * b[i] * b[i];
            for j in i + 1..n {
                s += 2.0 * self.get(i, j) * b[i] * b[j];
            }
        }
        s
    }

    /// `m self m^T`, symmetric by construction.
    pub fn congruence(&self, m: &RectMatrix) -> SymMatrix {
        debug_assert_eq!(m.cols, self.n);
        let sm = self.mul_rect(&m.transpose());
        SymMatrix::from_fn(m.rows, |i, j| (0..self.n).map(|l| m.get(i, l) * sm.get(l, j)).sum())
    }

    /// Eigendecomposition by cyclic Jacobi rotations; eigenvalues ascending.
    pub fn eigen(&self) -> Eigen {
        jacobi_eigen(self)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().values[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let e = self.eigen();
        e.values[self.n - 1]
    }

    /// Applies `f` to the spectrum.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let e = self.eigen();
        let mut vals = [0.0; MAX_DIM];
        for i in 0..self.n {
            vals[i] = f(e.values[i]);
        }
        e.recompose(&vals[..self.n])
    }
}

/// Eigenpairs; `vectors` holds the eigenvectors as columns.
#[derive(Clone, Copy, Debug)]
pub struct Eigen {
    pub values: [f64; MAX_DIM],
    pub vectors: RectMatrix,
}

impl Eigen {
    pub fn dim(&self) -> usize {
        self.vectors.rows
    }

    /// `V diag(vals) V^T`
    pub fn recompose(&self, vals: &[f64]) -> SymMatrix {
        let n = self.dim();
        let v = &self.vectors;
        SymMatrix::from_fn(n, |i, j| (0..n).map(|l| v.get(i, l) * vals[l] * v.get(j, l)).sum())
    }
}

fn eigen_2x2(a: &SymMatrix) -> Eigen {
    let (p, q, r) = (a.upper[0], a.upper[1], a.upper[2]);
    let mut vectors = RectMatrix::zeros(2, 2);
    let mut values = [0.0; MAX_DIM];
    if q == 0.0 {
        let (lo, hi, swap) = if p <= r { (p, r, false) } else { (r, p, true) };
        values[0] = lo;
        values[1] = hi;
        vectors.set(0, swap as usize, 1.0);
        vectors.set(1, 1 - swap as usize, 1.0);
        return Eigen { values, vectors };
    }
    let m = 0.5 * (p + r);
    let h = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    let det = p * r - q * q;
    // the eigenvalue of smaller magnitude from the determinant, to keep relative accuracy
    let (lo, hi) = if m >= 0.0 {
        let hi = m + h;
        (if hi != 0.0 { det / hi } else { 0.0 }, hi)
    } else {
        let lo = m - h;
        (lo, det / lo)
    };
    values[0] = lo.min(hi);
    values[1] = hi.max(lo);
    // eigenvector of the larger eigenvalue from the better conditioned row
    let big = values[1];
    let (mut x, mut y) = if (big - r).abs() >= (big - p).abs() { (big - r, q) } else { (q, big - p) };
    let nrm = (x * x + y * y).sqrt();
    x /= nrm;
    y /= nrm;
    vectors.set(0, 0, -y);
    vectors.set(1, 0, x);
    vectors.set(0, 1, x);
    vectors.set(1, 1, y);
    Eigen { values, vectors }
}

fn jacobi_eigen(a: &SymMatrix) -> Eigen {
    let n = a.n;
    if n == 1 {
        let mut values = [0.0; MAX_DIM];
        values[0] = a.upper[0];
        return Eigen { values, vectors: RectMatrix::identity(1) };
    }
    if n == 2 {
        return eigen_2x2(a);
    }
    let mut m = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = a.get(i, j);
        }
    }
    let mut v = [[0.0; MAX_DIM]; MAX_DIM];
    for (i, row) in v.iter_mut().enumerate().take(n) {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += m[i][i] * m[i][i];
            for j in i + 1..n {
                off += 2.0 * m[i][j] * m[i][j];
            }
        }
        if off <= 1e-28 * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                m[p][q] = 0.0;
                m[q][p] = 0.0;
                for row in v.iter_mut().take(n) {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2, 3];
    order[..n].sort_by(|&i, &j| m[i][i].total_cmp(&m[j][j]));
    let mut values = [0.0; MAX_DIM];
    let mut vectors = RectMatrix::zeros(n, n);
    for (col, &src) in order[..n].iter().enumerate() {
        values[col] = m[src][src];
        for (r, row) in v.iter().enumerate().take(n) {
            vectors.set(r, col, row[src]);
        }
    }
    Eigen { values, vectors }
}

/// Dense row-major matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct RectMatrix {
    rows: usize,
    cols: usize,
    data: [f64; MAX_DIM * MAX_DIM],
}

impl fmt::Debug for RectMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RectMatrix[")?;
        for i in 0..self.rows {
            if i > 0 {
                f.write_str("; ")?;
            }
            for j in 0..self.cols {
                if j > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{:?}", self.get(i, j))?;
            }
        }
        f.write_str("]")
    }
}

impl RectMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&rows) && (1..=MAX_DIM).contains(&cols), "shape {rows}x{cols} unsupported");
        RectMatrix { rows, cols, data: [0.0; MAX_DIM * MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&rows) || !(1..=MAX_DIM).contains(&cols) {
            return Err(Error::Unsupported("matrix dimensions must be 1..=4"));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape { expected: "rows*cols entries", found: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        let mut m = Self::zeros(rows, cols);
        m.data[..data.len()].copy_from_slice(data);
        Ok(m)
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data[..self.rows * self.cols]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let len = self.rows * self.cols;
        &mut self.data[..len]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        Self::from_fn(self.rows, other.cols, |i, j| (0..self.cols).map(|l| self.get(i, l) * other.get(l, j)).sum())
    }

    pub fn mul_sym(&self, s: &SymMatrix) -> Self {
        debug_assert_eq!(self.cols, s.dim());
        Self::from_fn(self.rows, s.dim(), |i, j| (0..self.cols).map(|l| self.get(i, l) * s.get(l, j)).sum())
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = *self;
        for (a, b) in m.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        m
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = *self;
        for (a, b) in m.data.iter_mut().zip(other.data.iter()) {
            *a -= b;
        }
        m
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut m = *self;
        for a in m.data.iter_mut() {
            *a *= c;
        }
        m
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_fro(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self * self^T`
    pub fn gram(&self) -> SymMatrix {
        SymMatrix::from_fn(self.rows, |i, j| (0..self.cols).map(|l| self.get(i, l) * self.get(j, l)).sum())
    }
}

/// Symmetric matrix certified positive semidefinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdMatrix(SymMatrix);

impl PsdMatrix {
    /// Accepts `a` if its smallest eigenvalue is at least `-PSD_TOL * |a|_F`,
    /// clamping eigenvalues in that band to zero.
    pub fn new(a: SymMatrix) -> Result<Self> {
        Self::with_repair(a).map(|(p, _)| p)
    }

    /// Like [`PsdMatrix::new`], also reporting whether a clamp was applied.
    pub fn with_repair(a: SymMatrix) -> Result<(Self, bool)> {
        if !a.is_finite() {
            return Err(Error::InvalidMatrix);
        }
        let tol = PSD_TOL * a.norm_fro();
        if a.dim() == 1 {
            let x = a.get(0, 0);
            return if x >= 0.0 {
                Ok((PsdMatrix(a), false))
            } else if x >= -tol {
                Ok((PsdMatrix(SymMatrix::zeros(1)), true))
            } else {
                Err(Error::NotPsd { min_eig: x, tol })
            };
        }
        let e = a.eigen();
        let min = e.values[0];
        if min >= 0.0 {
            return Ok((PsdMatrix(a), false));
        }
        if min < -tol {
            return Err(Error::NotPsd { min_eig: min, tol });
        }
        let mut vals = e.values;
        for v in vals.iter_mut() {
            *v = v.max(0.0);
        }
        Ok((PsdMatrix(e.recompose(&vals[..a.dim()])), true))
    }

    pub fn zeros(n: usize) -> Self {
        PsdMatrix(SymMatrix::zeros(n))
    }

    pub fn identity(n: usize) -> Self {
        PsdMatrix(SymMatrix::identity(n))
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    pub fn into_sym(self) -> SymMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }
}

/// Nearest PSD matrix in Frobenius norm (negative eigenvalues set to zero).
/// Also returns whether anything changed.
pub fn project_psd(a: &SymMatrix) -> (PsdMatrix, bool) {
    if a.dim() == 1 {
        let x = a.get(0, 0);
        return if x >= 0.0 { (PsdMatrix(*a), false) } else { (PsdMatrix(SymMatrix::zeros(1)), true) };
    }
    if a.dim() == 2 {
        // Cheap positivity test avoids the eigendecomposition in the common case.
        let (p, q, r) = (a.get(0, 0), a.get(0, 1), a.get(1, 1));
        if p >= 0.0 && r >= 0.0 && p * r - q * q >= 0.0 {
            return (PsdMatrix(*a), false);
        }
    }
    let e = a.eigen();
    if e.values[0] >= 0.0 {
        return (PsdMatrix(*a), false);
    }
    let mut vals = e.values;
    for v in vals.iter_mut() {
        *v = v.max(0.0);
    }
    (PsdMatrix(e.recompose(&vals[..a.dim()])), true)
}

/// Moore-Penrose pseudoinverse; eigenvalues with `|l| <= rank_tol * max|l|` are treated as zero.
pub fn pseudoinverse(a: &SymMatrix, rank_tol: f64) -> Result<SymMatrix> {
    if !a.is_finite() {
        return Err(Error::InvalidMatrix);
    }
    if a.dim() == 1 {
        let x = a.get(0, 0);
        return Ok(SymMatrix::scalar(1, if x == 0.0 { 0.0 } else { 1.0 / x }));
    }
    let e = a.eigen();
    let n = a.dim();
    let lmax = e.values[..n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = rank_tol * lmax;
    let mut inv = [0.0; MAX_DIM];
    for i in 0..n {
        let l = e.values[i];
        inv[i] = if l.abs() > cut && l != 0.0 { 1.0 / l } else { 0.0 };
    }
    Ok(e.recompose(&inv[..n]))
}

pub fn sqrt_psd(a: &PsdMatrix) -> PsdMatrix {
    let s = a.as_sym();
    if s.dim() == 1 {
        return PsdMatrix(SymMatrix::scalar(1, s.get(0, 0).max(0.0).sqrt()));
    }
    PsdMatrix(s.map_spectrum(|l| l.max(0.0).sqrt()))
}

/// Both sides of the Powers-Stormer inequality: `(|sqrt A - sqrt B|_F^2, sqrt(n) |A - B|_F)`.
pub fn powers_stormer_gap(a: &PsdMatrix, b: &PsdMatrix) -> Result<(f64, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::Shape { expected: "equal dimensions", found: b.dim() });
    }
    let d = sqrt_psd(a).as_sym().sub(sqrt_psd(b).as_sym());
    let lhs = d.dot(&d);
    let rhs = (a.dim() as f64).sqrt() * a.as_sym().sub(b.as_sym()).norm_fro();
    Ok((lhs, rhs))
}

pub fn symmetric_part(m: &RectMatrix) -> Result<SymMatrix> {
    if !m.is_square() {
        return Err(Error::Shape { expected: "square matrix", found: m.cols() });
    }
    Ok(SymMatrix::from_fn(m.rows(), |i, j| 0.5 * (m.get(i, j) + m.get(j, i))))
}

pub fn antisymmetric_part(m: &RectMatrix) -> Result<RectMatrix> {
    if !m.is_square() {
        return Err(Error::Shape { expected: "square matrix", found: m.cols() });
    }
    Ok(RectMatrix::from_fn(m.rows(), m.cols(), |i, j| 0.5 * (m.get(i, j) - m.get(j, i))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &SymMatrix, b: &SymMatrix, tol: f64) -> bool {
        a.sub(b).norm_fro() <= tol * (1.0 + b.norm_fro())
    }

    fn psd_strategy(n: usize) -> impl Strategy<Value = SymMatrix> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let m = RectMatrix::from_row_major(n, n, &v).unwrap();
            m.gram()
        })
    }

    #[test]
    fn pinv_examples() {
        let p = pseudoinverse(&SymMatrix::diag(&[2.0, 0.0]), DEFAULT_RANK_TOL).unwrap();
        assert!(close(&p, &SymMatrix::diag(&[0.5, 0.0]), 1e-14));
        let i3 = SymMatrix::identity(3);
        assert!(close(&pseudoinverse(&i3, DEFAULT_RANK_TOL).unwrap(), &i3, 1e-14));
        let a = SymMatrix::from_full(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        let p = pseudoinverse(&a, DEFAULT_RANK_TOL).unwrap();
        let expect = SymMatrix::from_full(2, &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0]).unwrap();
        assert!(close(&p, &expect, 1e-14));
        let apa = a.to_rect().matmul(&p.to_rect()).matmul(&a.to_rect());
        assert!(apa.sub(&a.to_rect()).norm_fro() < 1e-13);
    }

    #[test]
    fn pinv_rejects_nan() {
        let mut a = SymMatrix::identity(2);
        a.set(0, 1, f64::NAN);
        assert_eq!(pseudoinverse(&a, DEFAULT_RANK_TOL), Err(Error::InvalidMatrix));
    }

    #[test]
    fn sqrt_examples() {
        let s = sqrt_psd(&PsdMatrix::new(SymMatrix::diag(&[4.0, 9.0])).unwrap());
        assert!(close(s.as_sym(), &SymMatrix::diag(&[2.0, 3.0]), 1e-14));
        let a = SymMatrix::from_full(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        let s = sqrt_psd(&PsdMatrix::new(a).unwrap());
        let r3 = 3f64.sqrt();
        let expect = SymMatrix::from_full(2, &[(r3 + 1.0) / 2.0, (r3 - 1.0) / 2.0, (r3 - 1.0) / 2.0, (r3 + 1.0) / 2.0]).unwrap();
        assert!(close(s.as_sym(), &expect, 1e-14));
    }

    #[test]
    fn not_psd_rejected_and_noise_clamped() {
        assert!(matches!(PsdMatrix::new(SymMatrix::diag(&[1.0, -0.1])), Err(Error::NotPsd { .. })));
        let (p, repaired) = PsdMatrix::with_repair(SymMatrix::diag(&[1.0, -1e-14])).unwrap();
        assert!(repaired);
        assert!(p.as_sym().min_eigenvalue() >= 0.0);
    }

    #[test]
    fn powers_stormer_examples() {
        let i = PsdMatrix::identity(2);
        assert_eq!(powers_stormer_gap(&i, &i).unwrap(), (0.0, 0.0));
        let a = PsdMatrix::new(SymMatrix::diag(&[4.0, 4.0])).unwrap();
        let (l, r) = powers_stormer_gap(&a, &i).unwrap();
        assert!((l - 2.0).abs() < 1e-14);
        assert!((r - 6.0).abs() < 1e-13);
        assert!(powers_stormer_gap(&a, &PsdMatrix::identity(3)).is_err());
    }

    #[test]
    fn sym_antisym_examples() {
        let m = RectMatrix::from_row_major(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = symmetric_part(&m).unwrap();
        let a = antisymmetric_part(&m).unwrap();
        assert_eq!(s, SymMatrix::from_full(2, &[0.0, 0.5, 0.5, 0.0]).unwrap());
        assert_eq!(a.as_slice(), &[0.0, 0.5, -0.5, 0.0]);
        let rect = RectMatrix::zeros(2, 3);
        assert!(symmetric_part(&rect).is_err());
        assert!(antisymmetric_part(&rect).is_err());
    }

    #[test]
    fn jacobi_diagonalizes_4x4() {
        let a = SymMatrix::from_fn(4, |i, j| 1.0 / (1 + i + j) as f64);
        let e = a.eigen();
        let back = e.recompose(&e.values[..4]);
        assert!(close(&back, &a, 1e-14));
        for w in e.values[..4].windows(2) {
            assert!(w[0] <= w[1]);
        }
        let vtv = e.vectors.transpose().matmul(&e.vectors);
        assert!(vtv.sub(&RectMatrix::identity(4)).norm_fro() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn powers_stormer_holds(
            (a, b) in (1usize..=4).prop_flat_map(|n| (psd_strategy(n), psd_strategy(n)))
        ) {
            let a = PsdMatrix::new(a).unwrap();
            let b = PsdMatrix::new(b).unwrap();
            let (l, r) = powers_stormer_gap(&a, &b).unwrap();
            prop_assert!(l <= r + 1e-10);
        }
    }

    proptest! {
        #[test]
        fn pinv_of_psd_is_psd_and_commutes(a in (1usize..=4).prop_flat_map(psd_strategy)) {
            let p = pseudoinverse(&a, DEFAULT_RANK_TOL).unwrap();
            let scale = 1.0 + p.norm_fro() * a.norm_fro();
            prop_assert!(p.min_eigenvalue() >= -1e-10 * (1.0 + p.norm_fro()));
            let ap = a.to_rect().matmul(&p.to_rect());
            let pa = p.to_rect().matmul(&a.to_rect());
            prop_assert!(ap.sub(&pa).norm_fro() <= 1e-10 * scale);
            let apa = ap.matmul(&a.to_rect());
            prop_assert!(apa.sub(&a.to_rect()).norm_fro() <= 1e-10 * (1.0 + a.norm_fro()) * scale);
        }

        #[test]
        fn sqrt_inverts_square(m in (1usize..=4).prop_flat_map(psd_strategy)) {
            // m is PSD; its square is PSD with square root m.
            let sq = m.to_rect().matmul(&m.to_rect());
            let sq = symmetric_part(&sq).unwrap();
            let s = sqrt_psd(&PsdMatrix::new(sq).unwrap());
            // the root is only Holder-1/2 at singular matrices
            let holder = 2.0 * (m.dim() as f64).sqrt() * (1e-15 * sq.norm_fro()).sqrt();
            prop_assert!(s.as_sym().sub(&m).norm_fro() <= 1e-9 * (1.0 + m.norm_fro()) + holder);
        }

        #[test]
        fn sym_plus_antisym_reconstructs(n in 1usize..=4, v in proptest::collection::vec(-10.0f64..10.0, 16)) {
            let m = RectMatrix::from_row_major(n, n, &v[..n * n]).unwrap();
            let s = symmetric_part(&m).unwrap().to_rect();
            let a = antisymmetric_part(&m).unwrap();
            prop_assert!(s.add(&a).sub(&m).norm_fro() <= 1e-15 * (1.0 + m.norm_fro()));
            prop_assert_eq!(a.add(&a.transpose()), RectMatrix::zeros(n, n));
        }
    }
}
