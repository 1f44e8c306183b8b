//! Small dense matrix/vector kernels for factor updates.
//!
//! Factor marginalization never needs more than modest dense systems (the
//! naive reference path solves (V−1)×(V−1); the fast path solves M×M with
//! M ≤ 10 in every shipped model), so a row-major `Vec<T>` matrix with an
//! in-place Cholesky factorization covers all of it without a linear-algebra
//! dependency. Validation oracles reuse the same kernels to assemble and
//! solve full joint precision systems (≤ a few thousand variables).

use crate::error::{CoreError, Result};
use crate::real::{real, Real};

/// Contiguous real vector; dimensions are checked by the consuming ops.
pub type DenseVec<T> = Vec<T>;

/// Row-major dense matrix with explicit dimensions. No implicit broadcasting.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMat<T> {
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

    /// Build from row-major data; `data.len()` must equal `rows·cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::ShapeMismatch {
                context: "DenseMat::from_rows",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
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
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// `y = A·x` (checked).
    pub fn matvec(&self, x: &[T]) -> Result<DenseVec<T>> {
        if x.len() != self.cols {
            return Err(CoreError::ShapeMismatch {
                context: "matvec",
                expected: self.cols,
                got: x.len(),
            });
        }
        let mut y = vec![T::zero(); self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = T::zero();
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            y[r] = acc;
        }
        Ok(y)
    }

    /// `y = Aᵀ·x` (checked).
    pub fn matvec_t(&self, x: &[T]) -> Result<DenseVec<T>> {
        if x.len() != self.rows {
            return Err(CoreError::ShapeMismatch {
                context: "matvec_t",
                expected: self.rows,
                got: x.len(),
            });
        }
        let mut y = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for c in 0..self.cols {
                y[c] += row[c] * xr;
            }
        }
        Ok(y)
    }

    /// Frobenius-style max-abs entry, used by test tolerances.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Cholesky factor of an SPD matrix, reusable across multiple right-hand sides.
///
/// Linearized factors can be near-singular, so factorization retries once with
/// a `1e-9·trace/n` diagonal jitter before reporting `NotSpd`.
pub struct Cholesky<T> {
    /// Lower-triangular factor, row-major, `n×n`.
    l: DenseMat<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn new(a: &DenseMat<T>) -> Result<Self> {
        debug_assert_eq!(a.rows(), a.cols(), "Cholesky needs a square matrix");
        match Self::factor(a, T::zero()) {
            Ok(l) => Ok(Self { l }),
            Err(_) => {
                let n = a.rows();
                let trace = (0..n).map(|i| a[(i, i)]).fold(T::zero(), |s, v| s + v);
                let jitter = real::<T>(1e-9) * trace / T::from_usize(n.max(1)).unwrap();
                let l = Self::factor(a, jitter)?;
                Ok(Self { l })
            }
        }
    }

    fn factor(a: &DenseMat<T>, jitter: T) -> Result<DenseMat<T>> {
        let n = a.rows();
        let mut l = DenseMat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                if i == j {
                    sum += jitter;
                }
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= T::zero() || !sum.is_finite() {
                        return Err(CoreError::NotSpd { n, pivot: i });
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(l)
    }

    /// Solve `A·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.l.rows();
        debug_assert_eq!(b.len(), n);
        // Forward: L·y = b.
        for i in 0..n {
            let mut sum = b[i];
            let row = self.l.row(i);
            for k in 0..i {
                sum -= row[k] * b[k];
            }
            b[i] = sum / row[i];
        }
        // Backward: Lᵀ·x = y.
        for i in (0..n).rev() {
            let mut sum = b[i];
            for k in (i + 1)..n {
                sum -= self.l[(k, i)] * b[k];
            }
            b[i] = sum / self.l[(i, i)];
        }
    }

    pub fn solve(&self, b: &[T]) -> DenseVec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// In-place lower Cholesky of a row-major `n×n` SPD matrix stored in a flat
/// slice. Returns `false` on a non-positive (or non-finite) pivot.
///
/// The strict upper triangle is left untouched. No jitter retry: fast-path
/// callers fall back to the reference marginalization instead of masking a
/// genuinely ill-posed subsystem.
pub fn cholesky_in_place<T: Real>(a: &mut [T], n: usize) -> bool {
    debug_assert!(a.len() >= n * n);
    for c in 0..n {
        let mut d = a[c * n + c];
        for k in 0..c {
            let l = a[c * n + k];
            d -= l * l;
        }
        if d <= T::zero() || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[c * n + c] = d;
        let inv = d.recip();
        for r in (c + 1)..n {
            let mut s = a[r * n + c];
            for k in 0..c {
                s -= a[r * n + k] * a[c * n + k];
            }
            a[r * n + c] = s * inv;
        }
    }
    true
}

/// Solve `L·Lᵀ·x = b` in place given a factor from [`cholesky_in_place`].
pub fn chol_solve_in_place<T: Real>(l: &[T], n: usize, b: &mut [T]) {
    debug_assert!(l.len() >= n * n && b.len() >= n);
    for r in 0..n {
        let mut s = b[r];
        for k in 0..r {
            s -= l[r * n + k] * b[k];
        }
        b[r] = s / l[r * n + r];
    }
    for r in (0..n).rev() {
        let mut s = b[r];
        for k in (r + 1)..n {
            s -= l[k * n + r] * b[k];
        }
        b[r] = s / l[r * n + r];
    }
}

/// Solve `A·X = B` for SPD `A` (vector or matrix right-hand side).
///
/// Residual is bounded by the factorization quality; the SPD systems arising
/// from `Λ^(φ) + D` with positive incoming precisions are well within the
/// `1e-10·‖B‖` contract.
pub fn solve_spd<T: Real>(a: &DenseMat<T>, b: &[T]) -> Result<DenseVec<T>> {
    if b.len() != a.rows() {
        return Err(CoreError::ShapeMismatch { context: "solve_spd", expected: a.rows(), got: b.len() });
    }
    Ok(Cholesky::new(a)?.solve(b))
}

/// Solve with a matrix right-hand side, column by column.
pub fn solve_spd_mat<T: Real>(a: &DenseMat<T>, b: &DenseMat<T>) -> Result<DenseMat<T>> {
    if b.rows() != a.rows() {
        return Err(CoreError::ShapeMismatch { context: "solve_spd_mat", expected: a.rows(), got: b.rows() });
    }
    let chol = Cholesky::new(a)?;
    let mut x = DenseMat::zeros(b.rows(), b.cols());
    let mut col = vec![T::zero(); b.rows()];
    for c in 0..b.cols() {
        for r in 0..b.rows() {
            col[r] = b[(r, c)];
        }
        chol.solve_in_place(&mut col);
        for r in 0..b.rows() {
            x[(r, c)] = col[r];
        }
    }
    Ok(x)
}

/// Dense SPD inverse via `n` solves; used by validation oracles for marginal
/// variances, never in the message-passing hot path.
pub fn inverse_spd<T: Real>(a: &DenseMat<T>) -> Result<DenseMat<T>> {
    solve_spd_mat(a, &DenseMat::identity(a.rows()))
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DenseMat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = DenseMat::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                g[(r, c)] = rng.gen_range(-1.0..1.0);
            }
        }
        // A = GᵀG + n·I is SPD.
        let mut a = DenseMat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += g[(k, i)] * g[(k, j)];
                }
                a[(i, j)] = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = DenseMat::<f64>::identity(3);
        let b = vec![1.0, -2.0, 0.5];
        assert_eq!(solve_spd(&a, &b).unwrap(), b);
    }

    #[test]
    fn one_by_one_system() {
        let a = DenseMat::<f64>::from_rows(1, 1, vec![2.0]).unwrap();
        let x = solve_spd(&a, &[4.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_spd_residual_below_contract() {
        for seed in 0..10u64 {
            let a = random_spd(6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x = solve_spd(&a, &b).unwrap();
            let ax = a.matvec(&x).unwrap();
            let res: f64 = ax.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let bnorm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(res <= 1e-10 * bnorm.max(1.0), "residual {res} too large");
        }
    }

    #[test]
    fn inverse_spd_multiplies_to_identity() {
        let a = random_spd(5, 42);
        let inv = inverse_spd(&a).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a[(i, k)] * inv[(k, j)];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn near_singular_matrix_recovers_with_jitter() {
        // Rank-deficient up to rounding: [[1, 1], [1, 1 + 1e-15]].
        let a = DenseMat::<f64>::from_rows(2, 2, vec![1.0, 1.0, 1.0, 1.0 + 1e-15]).unwrap();
        // Jitter retry must produce a finite solution rather than NotSpd.
        let x = solve_spd(&a, &[1.0, 1.0]).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    /// The flat-slice Cholesky/solve pair must agree with the struct-based
    /// reference on a random SPD system.
    #[test]
    fn in_place_cholesky_matches_reference_solver() {
        let a = random_spd(6, 99);
        let b: Vec<f64> = (0..6).map(|i| (i as f64) - 2.5).collect();
        let x_ref = solve_spd(&a, &b).unwrap();
        let mut flat = a.as_slice().to_vec();
        assert!(cholesky_in_place(&mut flat, 6));
        let mut x = b.clone();
        chol_solve_in_place(&flat, 6, &mut x);
        for (xi, ri) in x.iter().zip(&x_ref) {
            assert!((xi - ri).abs() < 1e-10, "{xi} vs {ri}");
        }
    }

    #[test]
    fn in_place_cholesky_rejects_indefinite() {
        let mut flat = vec![1.0f64, 2.0, 2.0, 1.0]; // eigenvalues 3, −1
        assert!(!cholesky_in_place(&mut flat, 2));
    }

    #[test]
    fn transpose_matvec_agrees_with_explicit_transpose() {
        let a = DenseMat::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = a.matvec_t(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![-3.0, -3.0, -3.0]);
    }
}
