//! Dense helpers: symmetric eigendecomposition and minimum-norm least squares.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending
/// with matching orthonormal eigenvectors as columns.
///
/// Rejects inputs whose asymmetry exceeds `1e-10` relative to the largest
/// entry; callers are expected to symmetrize Gramians themselves if needed.
pub fn sym_eig(c: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = c.nrows();
    if n != c.ncols() {
        return Err(Error::Config(format!(
            "sym_eig: matrix is {}x{}, expected square",
            c.nrows(),
            c.ncols()
        )));
    }
    let scale = c.amax().max(1e-300);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((c[(i, j)] - c[(j, i)]).abs());
        }
    }
    if max_asym > 1e-10 * scale {
        return Err(Error::Config(format!(
            "sym_eig: matrix asymmetry {:.3e} exceeds 1e-10 relative",
            max_asym / scale
        )));
    }
    // Symmetrize to kill rounding-level asymmetry before factorizing.
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Minimum-norm least-squares solution of `A x = b` via SVD.
///
/// Rank is decided with the usual `max(m,n) * eps * sigma_max` cutoff, so
/// consistent overdetermined systems are solved exactly and rank-deficient
/// systems return the shortest minimizer.
pub fn dense_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::Config(format!(
            "dense_lstsq: {} rows vs rhs length {}",
            a.nrows(),
            b.len()
        )));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * smax.max(1e-300);
    svd.solve(b, eps)
        .map_err(|e| Error::Solver(format!("dense_lstsq: {e}")))
}
