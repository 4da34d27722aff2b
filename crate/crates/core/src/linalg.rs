//! Dense decompositions backed by `nalgebra`, exposed over `ndarray` types.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub(crate) fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Moore–Penrose pseudoinverse of a matrix with full row rank.
///
/// Fails with [`Error::SingularMatrix`] when the smallest singular value is
/// below `max(m, n) * eps * sigma_max`.
pub fn pseudo_inverse_full_row_rank(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (m, n) = a.dim();
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if m > n {
        return Err(Error::SingularMatrix(format!(
            "{m}x{n} matrix cannot have full row rank"
        )));
    }
    let svd = to_na(a).svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let tol = (m.max(n) as f64) * f64::EPSILON * s_max;
    if s_max == 0.0 || s_min <= tol {
        return Err(Error::SingularMatrix(format!(
            "rank deficient: smallest singular value {s_min:e} (tolerance {tol:e})"
        )));
    }
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::SingularMatrix(e.to_string()))?;
    Ok(from_na(&pinv))
}

/// Matrix with orthonormal columns spanning the same space as `a`'s columns
/// (thin QR). Requires `a.ncols() <= a.nrows()`.
pub fn orthonormal_columns(a: ArrayView2<'_, f64>) -> Array2<f64> {
    debug_assert!(a.ncols() <= a.nrows());
    let qr = to_na(a).qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix the sign ambiguity so the result is a deterministic function of `a`.
    let mut q = from_na(&q);
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).mapv_inplace(|v| -v);
        }
    }
    q
}

/// Checks that `cov` is symmetric positive semidefinite and returns a factor
/// `L` with `L Lᵀ = cov`.
///
/// Cholesky is used when it succeeds; semidefinite matrices fall back to the
/// symmetric eigendecomposition `V sqrt(Λ)`.
pub fn psd_factor(cov: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "covariance must be square, got {}x{}",
            n,
            cov.ncols()
        )));
    }
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-9 * scale {
                return Err(Error::InvalidArgument(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let m = to_na(cov);
    let eig = m.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-8 * scale {
        return Err(Error::InvalidArgument(format!(
            "covariance is not positive semidefinite (eigenvalue {min_eig:e})"
        )));
    }
    if let Some(chol) = m.cholesky() {
        return Ok(from_na(&chol.l()));
    }
    let mut factor = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(from_na(&factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pseudo_inverse_of_orthonormal_rows_is_transpose() {
        let d = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let p = pseudo_inverse_full_row_rank(d.view()).unwrap();
        for (a, b) in p.iter().zip(d.t().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let d = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]];
        assert!(matches!(
            pseudo_inverse_full_row_rank(d.view()),
            Err(Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn psd_factor_handles_semidefinite() {
        let cov = array![[1.0, 1.0], [1.0, 1.0]];
        let l = psd_factor(cov.view()).unwrap();
        let back = l.dot(&l.t());
        for (a, b) in back.iter().zip(cov.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let bad = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(psd_factor(bad.view()).is_err());
    }

    #[test]
    fn qr_columns_are_orthonormal() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]];
        let q = orthonormal_columns(a.view());
        let g = q.t().dot(&q);
        assert!((g[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((g[[1, 1]] - 1.0).abs() < 1e-12);
        assert!(g[[0, 1]].abs() < 1e-12);
    }
}
