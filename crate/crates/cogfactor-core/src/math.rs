//! Small numerical helpers: float shims usable without `std`, a dense
//! Cholesky factorization and a power-iteration condition estimate for
//! symmetric positive-definite Gram matrices.

use alloc::vec::Vec;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

// Transcendentals go through libm in both std and no_std builds so the
// two configurations produce bit-identical results.
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Cholesky factor (lower triangular, row-major) of a symmetric
/// positive-definite matrix. Returns `None` when a pivot drops below a
/// small positive floor, which signals a singular or indefinite input.
pub struct Cholesky {
    lower: Array2<f64>,
    dim: usize,
}

impl Cholesky {
    pub fn decompose(matrix: ArrayView2<'_, f64>) -> Option<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return None;
        }
        let mut lower = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut sum = matrix[(i, j)];
                for k in 0..j {
                    sum -= lower[(i, k)] * lower[(j, k)];
                }
                if i == j {
                    // Also rejects NaN pivots.
                    if sum.is_nan() || sum <= f64::MIN_POSITIVE {
                        return None;
                    }
                    lower[(i, j)] = sqrt(sum);
                } else {
                    lower[(i, j)] = sum / lower[(j, j)];
                }
            }
        }
        Some(Self { lower, dim: n })
    }

    /// Solves `A x = b` given the factorization `A = L Lᵀ`.
    pub fn solve_into(&self, b: ArrayView1<'_, f64>, out: &mut Array1<f64>) {
        let n = self.dim;
        debug_assert_eq!(b.len(), n);
        debug_assert_eq!(out.len(), n);
        // Forward substitution L y = b.
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.lower[(i, k)] * out[k];
            }
            out[i] = sum / self.lower[(i, i)];
        }
        // Back substitution Lᵀ x = y.
        for i in (0..n).rev() {
            let mut sum = out[i];
            for k in (i + 1)..n {
                sum -= self.lower[(k, i)] * out[k];
            }
            out[i] = sum / self.lower[(i, i)];
        }
    }

    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim);
        self.solve_into(b, &mut out);
        out
    }
}

/// Estimates the 2-norm condition number of a symmetric positive-definite
/// matrix from its extremal eigenvalues: power iteration for the largest,
/// inverse iteration through the Cholesky factor for the smallest.
pub fn spd_condition_estimate(matrix: ArrayView2<'_, f64>, chol: &Cholesky) -> f64 {
    let n = matrix.nrows();
    if n == 0 {
        return 1.0;
    }
    let lambda_max = power_iteration(n, |v, out| {
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                sum += matrix[(i, j)] * v[j];
            }
            out[i] = sum;
        }
    });
    let inv_lambda_min = power_iteration(n, |v, out| {
        chol.solve_into(ArrayView1::from(v), out);
    });
    if lambda_max <= 0.0 || inv_lambda_min <= 0.0 {
        return f64::INFINITY;
    }
    lambda_max * inv_lambda_min
}

fn power_iteration(n: usize, mut apply: impl FnMut(&[f64], &mut Array1<f64>)) -> f64 {
    // Deterministic non-uniform start vector; 64 iterations are plenty for
    // an order-of-magnitude condition estimate.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i % 7) as f64) / 7.0).collect();
    let norm0 = sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.iter_mut().for_each(|x| *x /= norm0);
    let mut out = Array1::zeros(n);
    let mut eigenvalue = 0.0;
    for _ in 0..64 {
        apply(&v, &mut out);
        let norm = sqrt(out.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 || !norm.is_finite() {
            return f64::INFINITY;
        }
        eigenvalue = norm;
        for (dst, src) in v.iter_mut().zip(out.iter()) {
            *dst = src / norm;
        }
    }
    eigenvalue
}

/// Frobenius norm of the difference of two equally shaped matrices,
/// relative to the norm of the reference.
pub fn relative_frobenius_error(value: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, b) in value.iter().zip(reference.iter()) {
        diff += (a - b) * (a - b);
        norm += b * b;
    }
    if norm == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    sqrt(diff / norm)
}

/// Maximum absolute entry of a matrix.
pub fn max_abs(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `a - b` for matrices, allocated.
pub fn sub(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    out -= &b;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_small_system() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let chol = Cholesky::decompose(a.view()).unwrap();
        let b = array![8.0, 7.0];
        let x = chol.solve(b.view());
        // Solve by hand: x = [1.25, 1.5].
        assert!((x[0] - 1.25).abs() < 1e-12);
        assert!((x[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(Cholesky::decompose(a.view()).is_none());
    }

    #[test]
    fn condition_of_diagonal_matrix() {
        let a = array![[100.0, 0.0], [0.0, 1.0]];
        let chol = Cholesky::decompose(a.view()).unwrap();
        let cond = spd_condition_estimate(a.view(), &chol);
        assert!((cond - 100.0).abs() / 100.0 < 1e-6, "cond = {cond}");
    }

    #[test]
    fn vec_of_zeros_has_zero_relative_error() {
        let a = Array2::<f64>::zeros((2, 2));
        assert_eq!(relative_frobenius_error(a.view(), a.view()), 0.0);
    }
}
