//! Small dense helpers shared by the model, the optimizers and the tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{LscError, Result};

/// Iteration cap for [`spectral_norm_psd`].
pub const POWER_MAX_ITERS: usize = 1000;
/// Relative change in the Rayleigh quotient at which power iteration stops.
pub const POWER_TOL: f64 = 1e-10;

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration with a Rayleigh-quotient estimate.
///
/// The start vector is fixed so the result is reproducible.
pub fn spectral_norm_psd(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64) * 0.7 + 0.3).sin());
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = m * &v;
        let rayleigh = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (rayleigh - estimate).abs() <= POWER_TOL * rayleigh.abs() {
            return rayleigh.max(norm);
        }
        estimate = rayleigh;
    }
    estimate
}

/// Thin QR factorization `a = q r` with the diagonal of `r` forced positive.
///
/// Fails when a diagonal entry of `r` is negligible relative to the column
/// scale, i.e. when `a` is numerically rank deficient.
pub fn qr_positive(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = a.ncols();
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    for j in 0..cols {
        let d = r[(j, j)];
        if d.abs() <= 1e-12 * scale {
            return Err(LscError::RankDeficient);
        }
        if d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// `max |(wᵀw − I)_ij|`.
pub fn orthonormality_error(w: &DMatrix<f64>) -> f64 {
    let gram = w.transpose() * w;
    let mut worst: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Fixed-order pairwise summation; the association order depends only on the
/// number of terms.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 2.5]));
        assert!((spectral_norm_psd(&m) - 4.0).abs() < 4.0 * 1e-8);
    }

    #[test]
    fn power_iteration_zero_matrix() {
        assert_eq!(spectral_norm_psd(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn qr_positive_diagonal_and_orthonormal() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -3.0, 0.5, 0.2, -1.0, 4.0, 1.0]);
        let q = qr_positive(&a).unwrap();
        assert!(orthonormality_error(&q) < 1e-14);
        let r = q.transpose() * &a;
        assert!(r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
        assert!(r[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn qr_rejects_rank_deficient() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(qr_positive(&a), Err(LscError::RankDeficient)));
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..37).map(|i| i as f64 * 0.25).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}
