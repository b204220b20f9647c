//! Symmetric-matrix primitives shared by every solver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{LqcError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Eigenvalue floor below which a symmetric matrix is treated as singular.
pub const EIG_FLOOR: f64 = 1e-10;

/// Asymmetry above which ingestion logs a warning before symmetrising.
pub const ASYMMETRY_WARN: f64 = 1e-8;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &Mat) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    (m - m.transpose()).amax()
}

/// Symmetrise an input that is supposed to be symmetric, warning on drift.
pub fn ingest_symmetric(name: &str, m: &Mat) -> Mat {
    let asym = asymmetry(m);
    if asym > ASYMMETRY_WARN {
        log::warn!("`{name}` is not symmetric (asymmetry {asym:e}); symmetrising");
    }
    symmetrize(m)
}

pub fn sym_eigen(m: &Mat) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn eigenvalues(m: &Mat) -> Vector {
    if m.nrows() == 1 {
        return Vector::from_element(1, m[(0, 0)]);
    }
    m.clone().symmetric_eigenvalues()
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    eigenvalues(&symmetrize(m)).min()
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    eigenvalues(&symmetrize(m)).max()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm2(m: &Mat) -> f64 {
    eigenvalues(&symmetrize(m)).amax()
}

/// Symmetric PSD square root with the default tolerance.
pub fn psd_sqrt(m: &Mat) -> Result<Mat> {
    let scale = m.amax().max(1.0);
    psd_sqrt_with_tol(m, 1e-10 * scale)
}

/// Symmetric PSD square root `S` with `S S^T = M`; eigenvalues in `[-tol, 0)`
/// are clamped to zero.
pub fn psd_sqrt_with_tol(m: &Mat, tol: f64) -> Result<Mat> {
    if !m.is_square() {
        return Err(LqcError::InvalidInput(format!(
            "square root of a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let eig = sym_eigen(m);
    let min = eig.eigenvalues.min();
    if min < -tol {
        return Err(LqcError::NotPsd { min_eig: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * Mat::from_diagonal(&roots) * q.transpose())))
}

/// Inverse of a symmetric positive-definite matrix via eigendecomposition.
pub fn sym_inverse(m: &Mat) -> Result<Mat> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if v <= EIG_FLOOR {
            return Err(LqcError::NotPositiveDefinite { min_eig: v });
        }
        return Ok(Mat::from_element(1, 1, 1.0 / v));
    }
    let eig = sym_eigen(m);
    let min = eig.eigenvalues.min();
    if min <= EIG_FLOOR {
        return Err(LqcError::NotPositiveDefinite { min_eig: min });
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * Mat::from_diagonal(&inv) * q.transpose())))
}

/// Moore–Penrose inverse of a symmetric matrix (eigenvalues below the floor
/// in magnitude are dropped).
pub fn sym_pinv(m: &Mat) -> Mat {
    let eig = sym_eigen(m);
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() <= EIG_FLOOR { 0.0 } else { 1.0 / l });
    let q = &eig.eigenvectors;
    symmetrize(&(q * Mat::from_diagonal(&inv) * q.transpose()))
}

/// `ln det M` for symmetric positive-definite `M`.
pub fn log_det_pd(m: &Mat) -> Result<f64> {
    let ev = eigenvalues(&symmetrize(m));
    let min = ev.min();
    if min <= 0.0 {
        return Err(LqcError::NotPositiveDefinite { min_eig: min });
    }
    Ok(ev.iter().map(|l| l.ln()).sum())
}

/// Frobenius inner product `tr(A^T B)`.
pub fn frob(a: &Mat, b: &Mat) -> f64 {
    a.dot(b)
}

/// Outcome of comparing two symmetric matrices in the Loewner order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoewnerOrder {
    Geq,
    Leq,
    Equal,
    Incomparable,
}

/// Compare `a` and `b` in the Loewner order with eigenvalue tolerance `tol`.
pub fn loewner_compare(a: &Mat, b: &Mat, tol: f64) -> LoewnerOrder {
    let ev = eigenvalues(&symmetrize(&(a - b)));
    let geq = ev.min() >= -tol;
    let leq = ev.max() <= tol;
    match (geq, leq) {
        (true, true) => LoewnerOrder::Equal,
        (true, false) => LoewnerOrder::Geq,
        (false, true) => LoewnerOrder::Leq,
        (false, false) => LoewnerOrder::Incomparable,
    }
}

/// `true` when `a - b` has no eigenvalue below `-tol`.
pub fn loewner_geq(a: &Mat, b: &Mat, tol: f64) -> bool {
    matches!(loewner_compare(a, b, tol), LoewnerOrder::Geq | LoewnerOrder::Equal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = Mat::identity(3, 3);
        assert_relative_eq!(psd_sqrt(&i).unwrap(), i, epsilon = 1e-14);
        let d = Mat::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&d).unwrap();
        assert_relative_eq!(s, Mat::from_diagonal(&Vector::from_vec(vec![2.0, 3.0])), epsilon = 1e-14);
    }

    #[test]
    fn sqrt_rejects_negative_eigenvalue() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1e-3]));
        assert!(matches!(psd_sqrt(&m), Err(LqcError::NotPsd { .. })));
        // tiny negative noise is clamped
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1e-14]));
        let s = psd_sqrt(&m).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn loewner_examples() {
        let i = Mat::identity(2, 2);
        let z = Mat::zeros(2, 2);
        assert_eq!(loewner_compare(&i, &z, 1e-12), LoewnerOrder::Geq);
        assert_eq!(loewner_compare(&z, &i, 1e-12), LoewnerOrder::Leq);
        assert_eq!(loewner_compare(&i, &i, 1e-12), LoewnerOrder::Equal);
        let a = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]));
        let b = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 1.0]));
        assert_eq!(loewner_compare(&a, &b, 1e-12), LoewnerOrder::Incomparable);
    }

    #[test]
    fn inverse_floor() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 1e-12]));
        assert!(sym_inverse(&m).is_err());
        let m = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let inv = sym_inverse(&m).unwrap();
        assert_relative_eq!(&m * inv, Mat::identity(2, 2), epsilon = 1e-14);
    }

    fn spd(dim: usize, entries: &[f64]) -> Mat {
        let l = Mat::from_iterator(dim, dim, entries.iter().copied());
        l.transpose() * &l + Mat::identity(dim, dim) * 1e-3
    }

    proptest! {
        #[test]
        fn sqrt_reconstructs_random_spd(dim in 1usize..=8, seed in proptest::collection::vec(-1.0f64..1.0, 64)) {
            let m = spd(dim, &seed[..dim * dim]);
            let s = psd_sqrt(&m).unwrap();
            prop_assert!(asymmetry(&s) < 1e-14);
            let err = (&s * s.transpose() - &m).norm();
            prop_assert!(err <= 1e-10 * m.norm(), "err {err}");
            let ss = psd_sqrt(&(&s * &s)).unwrap();
            prop_assert!((ss - &s).norm() <= 1e-9 * s.norm().max(1.0));
        }

        #[test]
        fn diagonal_sqrt_is_entrywise(diag in proptest::collection::vec(0.0f64..100.0, 1..8)) {
            let d = Mat::from_diagonal(&Vector::from_vec(diag.clone()));
            let s = psd_sqrt(&d).unwrap();
            for (i, v) in diag.iter().enumerate() {
                prop_assert!((s[(i, i)] - v.sqrt()).abs() <= 1e-12 * v.sqrt().max(1.0));
            }
        }
    }
}
