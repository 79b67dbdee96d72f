//! Small dense helpers shared by the mixing and spectral code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_STEPS: usize = 10_000;
/// Matrices up to this order fall back to a dense eigensolve when power
/// iteration stalls.
pub const DENSE_FALLBACK_MAX: usize = 64;

/// `I - 11ᵀ/m`.
pub fn centering(m: usize) -> DMatrix<f64> {
    let j = 1.0 / m as f64;
    DMatrix::from_fn(m, m, |r, c| if r == c { 1.0 - j } else { -j })
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = a.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Largest |eigenvalue| via dense eigensolve.
pub fn dense_spectral_norm(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a)
        .into_iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

#[derive(Debug, Clone)]
pub struct PowerResult {
    pub value: f64,
    pub vector: DVector<f64>,
    pub steps: usize,
    pub converged: bool,
}

/// Power iteration on a symmetric matrix. Stops when the eigen-residual
/// `‖Av − μv‖` drops below `tol · max(1, |μ|)`.
pub fn power_iteration(a: &DMatrix<f64>, tol: f64, max_steps: usize) -> PowerResult {
    let n = a.nrows();
    let mut v = DVector::from_fn(n, |i, _| 0.5 + ((i * 7919 + 13) % 101) as f64 / 101.0);
    v /= v.norm();
    let mut mu = 0.0;
    for step in 1..=max_steps {
        let av = a * &v;
        mu = v.dot(&av);
        let residual = (&av - &v * mu).norm();
        if residual <= tol * mu.abs().max(1.0) {
            return PowerResult {
                value: mu.abs(),
                vector: v,
                steps: step,
                converged: true,
            };
        }
        let norm = av.norm();
        if norm == 0.0 {
            return PowerResult {
                value: 0.0,
                vector: v,
                steps: step,
                converged: true,
            };
        }
        v = av / norm;
    }
    PowerResult {
        value: mu.abs(),
        vector: v,
        steps: max_steps,
        converged: false,
    }
}

/// Spectral norm and dominant eigenvector of a symmetric matrix.
///
/// Power iteration first; a dense eigensolve takes over for small matrices
/// whose leading eigenvalues are too close for the iteration to settle.
pub fn sym_spectral_norm(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let pr = power_iteration(a, POWER_TOL, POWER_MAX_STEPS);
    if pr.converged {
        return Ok((pr.value, pr.vector));
    }
    if a.nrows() > DENSE_FALLBACK_MAX {
        return Err(Error::PowerIteration(POWER_MAX_STEPS));
    }
    let eig = a.clone().symmetric_eigen();
    let (idx, value) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.abs()))
        .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok((value, eig.eigenvectors.column(idx).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_dense_on_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 2.0, 1.0, 0.0]));
        let (v, _) = sym_spectral_norm(&a).unwrap();
        assert!((v - 2.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_top_eigenvalue_still_converges() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 1.5, 0.2]));
        let pr = power_iteration(&a, POWER_TOL, POWER_MAX_STEPS);
        assert!(pr.converged);
        assert!((pr.value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn centering_annihilates_ones() {
        let p = centering(5);
        let ones = DVector::from_element(5, 1.0);
        assert!((p * ones).amax() < 1e-15);
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        let (v, _) = sym_spectral_norm(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(v, 0.0);
    }
}
