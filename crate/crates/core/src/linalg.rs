//! Small dense helpers shared by the sheaf operators and the autodiff kernels.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default ridge added to every degree block before taking its inverse square root.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Eigendecomposition of a regularized symmetric block together with its
/// inverse square root.
#[derive(Debug, Clone)]
pub struct InvSqrt {
    /// `(A + εI)^{-1/2}`.
    pub value: DMatrix<f64>,
    /// Eigenvalues of `A + εI`.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, one per column.
    pub eigenvectors: DMatrix<f64>,
}

/// Computes `(A + εI)^{-1/2}` for a symmetric `A` through its eigendecomposition.
///
/// Returns `Err(min_eigenvalue)` when the regularized block is not positive
/// definite. The check is relative to the block's largest eigenvalue, so an
/// exactly singular block fails even when rounding leaves a tiny positive
/// eigenvalue behind.
pub fn inv_sqrt_sym(a: &DMatrix<f64>, eps: f64) -> Result<InvSqrt, f64> {
    let d = a.nrows();
    let sym = (a + a.transpose()) * 0.5 + DMatrix::identity(d, d) * eps;
    let eig = SymmetricEigen::new(sym);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = if eps > 0.0 { 0.0 } else { 1e-12 * max_abs.max(1.0) };
    if !(min > floor) {
        return Err(min);
    }
    let q = &eig.eigenvectors;
    let s = DVector::from_iterator(d, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let value = q * DMatrix::from_diagonal(&s) * q.transpose();
    Ok(InvSqrt {
        value,
        eigenvalues: eig.eigenvalues,
        eigenvectors: eig.eigenvectors,
    })
}

/// Divided-difference kernel of `λ ↦ λ^{-1/2}`:
/// `(λ_i^{-1/2} - λ_j^{-1/2}) / (λ_i - λ_j)`, written in a form that stays
/// accurate when `λ_i ≈ λ_j` and reduces to `-½ λ^{-3/2}` on the diagonal.
#[inline]
pub fn inv_sqrt_divided_difference(li: f64, lj: f64) -> f64 {
    let si = li.sqrt();
    let sj = lj.sqrt();
    -1.0 / (si * sj * (si + sj))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_square_root_squares_to_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = inv_sqrt_sym(&a, 0.0).unwrap();
        let back = &r.value * &r.value * &a;
        assert!((back - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn singular_block_rejected_without_ridge() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(inv_sqrt_sym(&a, 0.0).is_err());
        assert!(inv_sqrt_sym(&a, DEFAULT_EPS).is_ok());
        assert!(inv_sqrt_sym(&DMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn divided_difference_limits() {
        let l: f64 = 2.5;
        let diag = inv_sqrt_divided_difference(l, l);
        assert!((diag + 0.5 * l.powf(-1.5)).abs() < 1e-15);
        let (a, b): (f64, f64) = (1.0, 4.0);
        let direct = (a.powf(-0.5) - b.powf(-0.5)) / (a - b);
        assert!((inv_sqrt_divided_difference(a, b) - direct).abs() < 1e-15);
    }
}
