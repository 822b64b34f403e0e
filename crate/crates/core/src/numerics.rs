//! Dense real linear algebra: row-major matrices, vectors, a one-sided
//! Jacobi SVD, orthonormal bases and orthogonal projectors.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::scalar::Scalar;

/// Default relative tolerance for numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Dense vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RealVector<T>(pub Vec<T>);

impl<T: Scalar> RealMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
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

    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return input(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return input(format!("non-finite matrix entry at flat index {pos}"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return input("ragged rows");
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Stacks vectors as the columns of a `dim × n` matrix.
    pub fn from_columns(dim: usize, cols: &[RealVector<T>]) -> Result<Self> {
        if let Some(bad) = cols.iter().find(|c| c.dim() != dim) {
            return input(format!("column of dim {} in a {dim}-row matrix", bad.dim()));
        }
        Ok(Self::from_fn(dim, cols.len(), |i, j| cols[j].0[i]))
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> RealVector<T> {
        RealVector((0..self.rows).map(|i| self[(i, j)]).collect())
    }

    pub fn columns(&self) -> Vec<RealVector<T>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &RealVector<T>) {
        for i in 0..self.rows {
            self[(i, j)] = v.0[i];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + a * s;
                }
            }
        }
        out
    }

    /// `self · v`
    pub fn matvec(&self, v: &RealVector<T>) -> RealVector<T> {
        assert_eq!(self.cols, v.dim(), "matvec shape mismatch");
        RealVector((0..self.rows).map(|i| dot_slices(self.row(i), &v.0)).collect())
    }

    /// `selfᵀ · v`
    pub fn tr_matvec(&self, v: &RealVector<T>) -> RealVector<T> {
        assert_eq!(self.rows, v.dim(), "tr_matvec shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let vi = v.0[i];
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        RealVector(out)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
    }

    /// Adds the outer product `s · u vᵀ` in place.
    pub fn add_outer(&mut self, s: T, u: &[T], v: &[T]) {
        assert_eq!((self.rows, self.cols), (u.len(), v.len()), "outer shape mismatch");
        for (i, &ui) in u.iter().enumerate() {
            let f = s * ui;
            if f == T::zero() {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r = *r + f * vj;
            }
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn frobenius(&self) -> T {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        Self::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                other[(i, j - self.cols)]
            }
        })
    }

    /// Keeps the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        Self::from_fn(self.rows, k.min(self.cols), |i, j| self[(i, j)])
    }

    /// Columns `start..end`.
    pub fn column_range(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    pub fn cast<U: Scalar>(&self) -> RealMatrix<U> {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.to_f64_lossy())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for RealMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for RealMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Scalar> RealVector<T> {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[k] = T::one();
        v
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self(values.iter().map(|&x| T::of(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.dim(), other.dim(), "dot dim mismatch");
        dot_slices(&self.0, &other.0)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.iter().map(|&x| x * s).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect())
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a = *a + s * b;
        }
    }

    /// Unit-normalized copy, or `None` when the norm is not above `floor`.
    pub fn normalized(&self, floor: T) -> Option<Self> {
        let n = self.norm();
        (n > floor).then(|| self.scale(T::one() / n))
    }
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine<T: Scalar>(u: &RealVector<T>, v: &RealVector<T>) -> Result<T> {
    if u.dim() != v.dim() {
        return input(format!("cosine of dims {} and {}", u.dim(), v.dim()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == T::zero() || nv == T::zero() {
        return input("cosine of a zero vector");
    }
    let c = u.dot(v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Thin singular value decomposition `m = u · diag(sigma) · vᵀ`.
///
/// For an `r × c` input with `k = min(r, c)`: `u` is `r × k`, `v` is
/// `c × k`, `sigma` has `k` nonincreasing entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult<T> {
    pub u: RealMatrix<T>,
    pub sigma: Vec<T>,
    pub v: RealMatrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> RealMatrix<T> {
        let k = self.sigma.len();
        let us = RealMatrix::from_fn(self.u.rows(), k, |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.v.transpose())
    }

    /// Number of singular values above `rel_tol · sigma_1`.
    pub fn numerical_rank(&self, rel_tol: T) -> usize {
        match self.sigma.first() {
            Some(&s1) if s1 > T::zero() => self.sigma.iter().filter(|&&s| s > rel_tol * s1).count(),
            _ => 0,
        }
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Deterministic: the same input bytes always produce the same output.
/// Each left singular vector is signed so its first nonzero entry is
/// nonnegative.
pub fn svd<T: Scalar>(m: &RealMatrix<T>) -> Result<SvdResult<T>> {
    if m.rows() == 0 || m.cols() == 0 {
        return input("svd of an empty matrix");
    }
    if !m.is_finite() {
        return input("svd of a matrix with non-finite entries");
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose())?;
        // Transposing swaps the roles of u and v; re-sign on the new u.
        let mut out = SvdResult { u: t.v, sigma: t.sigma, v: t.u };
        canonical_signs(&mut out);
        return Ok(out);
    }
    svd_tall(m)
}

fn svd_tall<T: Scalar>(m: &RealMatrix<T>) -> Result<SvdResult<T>> {
    let (rows, n) = m.shape();
    let mut a: Vec<Vec<T>> = (0..n).map(|j| m.column(j).0).collect();
    let mut v: Vec<Vec<T>> = (0..n).map(|j| RealVector::<T>::basis(n, j).0).collect();
    let tol = T::epsilon() * T::of_usize(rows.max(2));
    let tiny = T::min_positive_value();

    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot_slices(&a[p], &a[p]);
                let beta = dot_slices(&a[q], &a[q]);
                let gamma = dot_slices(&a[p], &a[q]);
                if alpha <= tiny || beta <= tiny || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        sweeps += 1;
        if !rotated {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::Numerical { msg: "jacobi svd did not converge".into(), iterations: sweeps });
        }
    }

    let norms: Vec<T> = a.iter().map(|col| dot_slices(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order, so output is reproducible.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let scale = norms.iter().fold(T::zero(), |acc, &x| acc.max(x));
    let zero_floor = scale * T::epsilon() * T::of_usize(rows.max(n));
    let mut u_cols: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        if s > zero_floor && s > tiny {
            u_cols.push(Some(a[j].iter().map(|&x| x / s).collect()));
            sigma.push(s);
        } else {
            u_cols.push(None);
            sigma.push(T::zero());
        }
        v_cols.push(v[j].clone());
    }
    let u_cols = complete_orthonormal(rows, u_cols);

    let mut out = SvdResult {
        u: RealMatrix::from_fn(rows, n, |i, j| u_cols[j][i]),
        sigma,
        v: RealMatrix::from_fn(n, n, |i, j| v_cols[j][i]),
    };
    canonical_signs(&mut out);
    Ok(out)
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other
/// column, drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal<T: Scalar>(dim: usize, cols: Vec<Option<Vec<T>>>) -> Vec<Vec<T>> {
    let mut done: Vec<Vec<T>> = cols.iter().flatten().cloned().collect();
    let mut next_basis = 0;
    cols.into_iter()
        .map(|c| match c {
            Some(c) => c,
            None => loop {
                assert!(next_basis < dim, "cannot complete an orthonormal set");
                let mut w = RealVector::<T>::basis(dim, next_basis).0;
                next_basis += 1;
                for _ in 0..2 {
                    for d in &done {
                        let proj = dot_slices(&w, d);
                        for (wi, &di) in w.iter_mut().zip(d) {
                            *wi = *wi - proj * di;
                        }
                    }
                }
                let n = dot_slices(&w, &w).sqrt();
                if n > T::of(0.5) {
                    let w: Vec<T> = w.iter().map(|&x| x / n).collect();
                    done.push(w.clone());
                    break w;
                }
            },
        })
        .collect()
}

fn canonical_signs<T: Scalar>(s: &mut SvdResult<T>) {
    for j in 0..s.u.cols() {
        let col = s.u.column(j);
        let peak = col.0.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
        let floor = peak * T::epsilon() * T::of(16.0);
        if let Some(&first) = col.0.iter().find(|x| x.abs() > floor) {
            if first < T::zero() {
                for i in 0..s.u.rows() {
                    s.u[(i, j)] = -s.u[(i, j)];
                }
                for i in 0..s.v.rows() {
                    s.v[(i, j)] = -s.v[(i, j)];
                }
            }
        }
    }
}

/// Orthonormal basis (as columns) of the numerical column space of `m`:
/// left singular vectors whose singular value exceeds `rel_tol · sigma_1`.
///
/// A numerically zero matrix yields a `rows × 0` basis.
pub fn orthonormal_basis<T: Scalar>(m: &RealMatrix<T>, rel_tol: T) -> Result<RealMatrix<T>> {
    if !(rel_tol > T::zero() && rel_tol < T::one()) {
        return input(format!("rel_tol must lie in (0,1), got {rel_tol}"));
    }
    let s = svd(m)?;
    Ok(s.u.leading_columns(s.numerical_rank(rel_tol)))
}

/// Smallest leading-singular-vector basis holding `energy` of the squared
/// singular mass, after numerical-rank truncation.
pub fn energy_basis<T: Scalar>(m: &RealMatrix<T>, energy: T, rel_tol: T) -> Result<RealMatrix<T>> {
    if !(energy > T::zero() && energy <= T::one()) {
        return input(format!("energy fraction must lie in (0,1], got {energy}"));
    }
    let s = svd(m)?;
    let rank = s.numerical_rank(rel_tol);
    let total: T = s.sigma[..rank].iter().map(|&x| x * x).sum();
    let mut acc = T::zero();
    let mut k = 0;
    while k < rank {
        acc = acc + s.sigma[k] * s.sigma[k];
        k += 1;
        if acc >= energy * total {
            break;
        }
    }
    Ok(s.u.leading_columns(k))
}

/// Largest `|BᵀB − I|` entry.
pub fn orthonormality_defect<T: Scalar>(basis: &RealMatrix<T>) -> T {
    let g = basis.transpose().matmul(basis);
    g.sub(&RealMatrix::identity(basis.cols())).max_abs()
}

/// Orthogonal projector `B·Bᵀ` onto the span of the columns of `basis`
/// and its complement `I − B·Bᵀ`.
pub fn projectors<T: Scalar>(
    basis: &RealMatrix<T>,
    ambient_dim: usize,
) -> Result<(RealMatrix<T>, RealMatrix<T>)> {
    if basis.rows() != ambient_dim {
        return input(format!("basis has {} rows, ambient dim is {ambient_dim}", basis.rows()));
    }
    let defect = orthonormality_defect(basis);
    if defect > T::of(T::ORTHO_TOL) {
        return input(format!("basis columns not orthonormal: max |BᵀB − I| = {defect:e}"));
    }
    let p = basis.matmul(&basis.transpose());
    let p_perp = RealMatrix::identity(ambient_dim).sub(&p);
    Ok((p, p_perp))
}

/// Modified Gram-Schmidt orthonormalization of the columns of `m`,
/// dropping columns whose residual falls below `drop_tol` (relative to
/// their original norm).
pub fn gram_schmidt<T: Scalar>(m: &RealMatrix<T>, drop_tol: T) -> RealMatrix<T> {
    let mut kept: Vec<RealVector<T>> = Vec::new();
    for col in m.columns() {
        let n0 = col.norm();
        if n0 == T::zero() {
            continue;
        }
        let mut w = col;
        for _ in 0..2 {
            for k in &kept {
                let proj = w.dot(k);
                w.axpy(-proj, k);
            }
        }
        let n = w.norm();
        if n > drop_tol * n0 {
            kept.push(w.scale(T::one() / n));
        }
    }
    RealMatrix::from_fn(m.rows(), kept.len(), |i, j| kept[j].0[i])
}

/// Solves `a · x = b` for symmetric positive definite `a` by Cholesky,
/// column by column of `b`.
pub fn solve_spd<T: Scalar>(a: &RealMatrix<T>, b: &RealMatrix<T>) -> Result<RealMatrix<T>> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return input("solve_spd shape mismatch");
    }
    let mut l = RealMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= T::zero() {
                    return Err(Error::Numerical { msg: "matrix not positive definite".into(), iterations: i });
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    let mut x = RealMatrix::<T>::zeros(n, b.cols());
    for c in 0..b.cols() {
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s = s - l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s = s - l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, Rng};
    use proptest::prelude::*;

    fn rel_residual(a: &RealMatrix<f64>, b: &RealMatrix<f64>) -> f64 {
        a.sub(b).frobenius() / a.frobenius().max(f64::MIN_POSITIVE)
    }

    fn outer(u: &[f64], v: &[f64]) -> RealMatrix<f64> {
        RealMatrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd(&RealMatrix::<f64>::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        let h = 1.0 / 2f64.sqrt();
        let m = outer(&[h, h, 0.0], &[0.0, 0.6, 0.8]);
        let s = svd(&m).unwrap();
        assert!((s.sigma[0] - 1.0).abs() < 1e-14);
        assert!(s.sigma[1].abs() < 1e-14 && s.sigma[2].abs() < 1e-14);
        assert_eq!(orthonormal_basis(&m, 1e-10).unwrap().cols(), 1);
    }

    #[test]
    fn random_tall_and_wide_reconstruct() {
        let mut rng = Rng::from_seed_u64(7);
        for (r, c) in [(4, 3), (3, 4), (8, 8), (1, 5), (5, 1)] {
            let m = gaussian_matrix(&mut rng, r, c, 1.0);
            let s = svd(&m).unwrap();
            assert!(rel_residual(&m, &s.reconstruct()) < 1e-8, "{r}x{c}");
            assert!(orthonormality_defect(&s.u) < 1e-10);
            assert!(orthonormality_defect(&s.v) < 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_u_is_completed() {
        let m = RealMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let s = svd(&m).unwrap();
        assert!(orthonormality_defect(&s.u) < 1e-12);
        assert!(rel_residual(&m, &s.reconstruct()) < 1e-12);
        assert_eq!(s.numerical_rank(1e-10), 1);
    }

    #[test]
    fn tiny_singular_value_is_truncated() {
        // Known factors: sigma = [1, 1e-12] with rotations on both sides.
        let (c, s) = (0.6, 0.8);
        let u = RealMatrix::from_rows(&[vec![c, -s], vec![s, c], vec![0.0, 0.0]]).unwrap();
        let v = RealMatrix::from_rows(&[vec![s, c], vec![-c, s]]).unwrap();
        let sig = RealMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-12]]).unwrap();
        let m = u.matmul(&sig).matmul(&v.transpose());
        assert_eq!(orthonormal_basis(&m, 1e-10).unwrap().cols(), 1);
        assert_eq!(orthonormal_basis(&RealMatrix::<f64>::identity(3), 1e-10).unwrap().cols(), 3);
    }

    #[test]
    fn zero_matrix_has_empty_basis() {
        let b = orthonormal_basis(&RealMatrix::<f64>::zeros(4, 2), 1e-10).unwrap();
        assert_eq!(b.shape(), (4, 0));
    }

    #[test]
    fn svd_rejects_non_finite_and_empty() {
        let mut m = RealMatrix::<f64>::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(Error::Input(_))));
        assert!(matches!(svd(&RealMatrix::<f64>::zeros(0, 3)), Err(Error::Input(_))));
        assert!(RealMatrix::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sign_convention_first_nonzero_nonnegative() {
        let mut rng = Rng::from_seed_u64(3);
        let s = svd(&gaussian_matrix::<f64>(&mut rng, 5, 3, 1.0)).unwrap();
        for j in 0..3 {
            let col = s.u.column(j);
            let first = col.0.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first >= 0.0);
        }
    }

    #[test]
    fn projector_examples() {
        let e1 = RealMatrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let (p, _) = projectors(&e1, 3).unwrap();
        assert!(p.matmul(&p).sub(&p).frobenius() == 0.0);
        assert_eq!(p[(0, 0)], 1.0);

        let empty = RealMatrix::<f64>::zeros(3, 0);
        let (p0, q0) = projectors(&empty, 3).unwrap();
        assert_eq!(p0, RealMatrix::zeros(3, 3));
        assert_eq!(q0, RealMatrix::identity(3));

        let e12 = RealMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let (_, q) = projectors(&e12, 3).unwrap();
        assert_eq!(q.matvec(&RealVector::basis(3, 2)).0, vec![0.0, 0.0, 1.0]);
        assert_eq!(q.matvec(&RealVector::basis(3, 0)).0, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn projector_rejects_non_orthonormal() {
        let b = RealMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        match projectors(&b, 2) {
            Err(Error::Input(msg)) => assert!(msg.contains("orthonormal")),
            other => panic!("{other:?}"),
        }
        assert!(projectors(&b, 3).is_err());
    }

    #[test]
    fn cosine_examples() {
        let e1 = RealVector::<f64>::basis(2, 0);
        let e2 = RealVector::<f64>::basis(2, 1);
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        let h = RealVector::from_f64(&[1.0, 1.0]).scale(1.0 / 2f64.sqrt());
        assert!((cosine(&h, &e1).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(cosine(&e1, &RealVector::zeros(2)).is_err());
        assert!(cosine(&e1, &RealVector::zeros(3)).is_err());
    }

    #[test]
    fn solve_spd_matches_direct_product() {
        let mut rng = Rng::from_seed_u64(11);
        let g = gaussian_matrix(&mut rng, 5, 5, 1.0);
        let a = g.matmul(&g.transpose()).add(&RealMatrix::identity(5));
        let x = gaussian_matrix(&mut rng, 5, 2, 1.0);
        let b = a.matmul(&x);
        assert!(rel_residual(&x, &solve_spd(&a, &b).unwrap()) < 1e-10);
    }

    #[test]
    fn works_in_single_precision() {
        let m = RealMatrix::<f32>::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let s = svd(&m).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-5 && (s.sigma[1] - 2.0).abs() < 1e-5);
        let b = orthonormal_basis(&m, 1e-5).unwrap();
        let (p, q) = projectors(&b, 3).unwrap();
        assert!(p.matmul(&q).frobenius() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn svd_invariants(seed in any::<u64>(), r in 1usize..9, c in 1usize..9) {
            let mut rng = Rng::from_seed_u64(seed);
            let m = gaussian_matrix::<f64>(&mut rng, r, c, 1.0);
            let s = svd(&m).unwrap();
            let energy: f64 = s.sigma.iter().map(|x| x * x).sum();
            prop_assert!((energy - m.frobenius_sq()).abs() <= 1e-8 * m.frobenius_sq());
            prop_assert!(rel_residual(&m, &s.reconstruct()) < 1e-8);
            prop_assert!(orthonormality_defect(&s.u) < 1e-10);
            prop_assert_eq!(svd(&m).unwrap(), s);
        }

        #[test]
        fn projector_invariants(seed in any::<u64>(), d in 1usize..10, k in 0usize..10) {
            let k = k.min(d);
            let mut rng = Rng::from_seed_u64(seed);
            let b = gram_schmidt(&gaussian_matrix(&mut rng, d, k, 1.0), 1e-8);
            let (p, q) = projectors(&b, d).unwrap();
            prop_assert!(p.matmul(&p).sub(&p).frobenius() < 1e-10);
            prop_assert!(p.matmul(&q).frobenius() < 1e-10);
            prop_assert!(p.add(&q).sub(&RealMatrix::identity(d)).max_abs() < 1e-15);
        }
    }
}
