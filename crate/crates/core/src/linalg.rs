//! Small dense linear-algebra helpers bridging `ndarray` and `nalgebra`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub(crate) fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Leading `k` eigenvectors (descending eigenvalue) of a symmetric matrix.
///
/// Each column's sign is fixed so that its largest-magnitude entry is positive,
/// which makes the output deterministic across eigensolver internals.
pub fn leading_eigenvectors(sym: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    let n = sym.nrows();
    if sym.ncols() != n {
        return Err(Error::shape(format!("matrix is {}x{}, expected square", n, sym.ncols())));
    }
    if k > n {
        return Err(Error::InvalidConfig(format!("requested {k} eigenvectors of a {n}x{n} matrix")));
    }
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(to_na(sym), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut out = Array2::zeros((n, k));
    for (dst, &src) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[[i, dst]] = sign * col[i];
        }
    }
    Ok(out)
}

/// Orthonormal basis for the column span of `a` (thin QR).
pub(crate) fn orthonormal_basis(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let qr = to_na(a).qr();
    from_na(&qr.q())
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
///
/// Computed as `asin` of the spectral norm of the residual of `span(b)` after
/// projection onto `span(a)`, which stays accurate for tiny angles.
pub fn largest_principal_angle(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(format!(
            "subspaces live in R^{} and R^{}",
            a.nrows(),
            b.nrows()
        )));
    }
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let resid = &qb - &qa.dot(&qa.t().dot(&qb));
    let sv = to_na(resid.view()).singular_values();
    let s = sv.iter().copied().fold(0.0_f64, f64::max).min(1.0);
    Ok(s.asin())
}
