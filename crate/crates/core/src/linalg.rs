//! Small dense helpers on top of nalgebra. All matrices here are r×r with r tiny.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this make an SPD inverse square root meaningless.
pub const SPD_FLOOR: f64 = 1e-14;

/// Residual ‖A − Aᵀ‖_F.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).norm()
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn sym_eigenvalues_desc(a: &DMatrix<f64>) -> Vec<f64> {
    let mut vals: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.total_cmp(x));
    vals
}

/// `A^{-1/2}` for symmetric positive definite `A`, through its eigendecomposition.
pub fn inv_sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !min_eig.is_finite() || min_eig < SPD_FLOOR {
        return Err(Error::Singular { min_eig });
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&d) * q.transpose())
}

/// `A^{1/2}` for symmetric positive semidefinite `A`; tiny negative eigenvalues are clipped.
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&d) * q.transpose()
}

/// ‖XᵀX − I‖_F.
pub fn orthonormality_residual(x: &DMatrix<f64>) -> f64 {
    let r = x.ncols();
    (x.tr_mul(x) - DMatrix::<f64>::identity(r, r)).norm()
}

pub fn all_finite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let s = inv_sqrt_spd(&a).unwrap();
        let prod = &s * &a * &s;
        assert!((prod - DMatrix::<f64>::identity(3, 3)).norm() < 1e-13);
    }

    #[test]
    fn inv_sqrt_rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(inv_sqrt_spd(&a), Err(Error::Singular { .. })));
    }

    #[test]
    fn eigenvalues_are_descending() {
        let a = DMatrix::from_diagonal_element(3, 3, 1.0) * 0.5 + DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -0.25]);
        assert_eq!(sym_eigenvalues_desc(&a), vec![1.5, 0.5, 0.25]);
    }
}
