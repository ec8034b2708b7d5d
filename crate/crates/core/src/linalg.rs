//! Small dense helpers shared by the DP and Riccati routes.

use nalgebra::SymmetricEigen;

use crate::model::{symmetrize, Mat};

/// Relative threshold below which an eigenvalue counts as zero.
pub const NULL_TOL: f64 = 1e-14;
/// Condition number above which a nonsingular `R + D'PD` is rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricSolve {
    /// `K^+ rhs`.
    pub solution: Mat,
    pub min_eig: f64,
    pub max_abs_eig: f64,
    /// `max|eig| / min|eig|` over the non-null spectrum.
    pub condition: f64,
    /// Number of eigenvalues treated as zero.
    pub null_dims: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SolveFailure {
    /// A negative eigenvalue: the quadratic is unbounded below.
    Indefinite { min_eig: f64 },
    /// Null directions that the right-hand side does not annihilate, or an
    /// ill-conditioned nonsingular matrix.
    Singular { condition: f64, min_eig: f64 },
}

/// Solves `K X = rhs` for symmetric `K`, requiring `K >= 0`.
///
/// Null directions of `K` are allowed only when `rhs` has no component
/// along them; the minimum-norm solution is returned then. This covers the
/// degenerate all-zero problem without hiding genuine singularity.
pub fn solve_psd(k: &Mat, rhs: &Mat, require_psd: bool) -> Result<SymmetricSolve, SolveFailure> {
    let k = symmetrize(k);
    let eig = SymmetricEigen::new(k);
    let max_abs = eig.eigenvalues.amax();
    let min_eig = eig.eigenvalues.min();
    let null_tol = NULL_TOL * max_abs.max(f64::MIN_POSITIVE);
    if require_psd && min_eig < -null_tol {
        return Err(SolveFailure::Indefinite { min_eig });
    }
    let projected = eig.eigenvectors.transpose() * rhs;
    let rhs_scale = rhs.amax();
    let mut min_nonnull = f64::INFINITY;
    let mut scaled = projected.clone();
    let mut null_dims = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= null_tol {
            let leak = projected.row(i).amax();
            if leak > NULL_TOL * rhs_scale.max(1.0) {
                return Err(SolveFailure::Singular {
                    condition: f64::INFINITY,
                    min_eig,
                });
            }
            scaled.row_mut(i).fill(0.0);
            null_dims += 1;
        } else {
            min_nonnull = min_nonnull.min(lambda.abs());
            scaled.row_mut(i).scale_mut(1.0 / lambda);
        }
    }
    let condition = if min_nonnull.is_finite() {
        max_abs / min_nonnull
    } else {
        1.0
    };
    if condition > MAX_CONDITION {
        return Err(SolveFailure::Singular { condition, min_eig });
    }
    Ok(SymmetricSolve {
        solution: &eig.eigenvectors * scaled,
        min_eig,
        max_abs_eig: max_abs,
        condition,
        null_dims,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(k: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(k)).eigenvalues.min()
}

/// Condition number `|max eig| / |min eig|` of a square matrix via SVD.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_positive_definite() {
        let k = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let rhs = Mat::from_row_slice(2, 1, &[1.0, 2.0]);
        let s = solve_psd(&k, &rhs, true).unwrap();
        assert!((&k * &s.solution - &rhs).amax() < 1e-14);
    }

    #[test]
    fn zero_matrix_with_zero_rhs_gives_zero() {
        let s = solve_psd(&Mat::zeros(2, 2), &Mat::zeros(2, 3), true).unwrap();
        assert_eq!(s.solution, Mat::zeros(2, 3));
    }

    #[test]
    fn inconsistent_null_direction_is_singular() {
        let k = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let rhs = Mat::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(solve_psd(&k, &rhs, true), Err(SolveFailure::Singular { .. })));
    }

    #[test]
    fn negative_eigenvalue_is_indefinite() {
        let k = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let rhs = Mat::zeros(2, 1);
        assert!(matches!(solve_psd(&k, &rhs, true), Err(SolveFailure::Indefinite { .. })));
        assert!(solve_psd(&k, &rhs, false).is_ok());
    }

    #[test]
    fn ill_conditioned_is_rejected() {
        let k = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13 * 1.5]);
        let rhs = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(solve_psd(&k, &rhs, true), Err(SolveFailure::Singular { .. })));
    }
}
