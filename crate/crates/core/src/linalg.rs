//! Small dense helpers shared by the region and optimizer modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Result};

pub(crate) const LOG2_E: f64 = std::f64::consts::LOG2_E;

/// Indices `m` with bit `m` set in `mask`, ascending.
pub(crate) fn mask_indices(mask: u32, m: usize) -> Vec<usize> {
    (0..m).filter(|&i| mask & (1 << i) != 0).collect()
}

/// Indices `m < len` with bit `m` clear, ascending.
pub(crate) fn complement_indices(mask: u32, m: usize) -> Vec<usize> {
    (0..m).filter(|&i| mask & (1 << i) == 0).collect()
}

pub(crate) fn full_mask(m: usize) -> u32 {
    if m >= 32 {
        u32::MAX
    } else {
        (1u32 << m) - 1
    }
}

/// Submatrix with the given row and column index sets.
pub(crate) fn block(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub(crate) fn principal(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    block(a, idx, idx)
}

pub(crate) fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// `log2 det(a)` for a symmetric positive definite matrix, via Cholesky.
/// The empty matrix has determinant one.
pub(crate) fn log2_det_pd(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| domain("matrix is not positive definite"))?;
    let l = chol.l_dirty();
    let sum_ln: f64 = (0..a.nrows()).map(|i| l[(i, i)].ln()).sum();
    Ok(2.0 * sum_ln * LOG2_E)
}

pub(crate) fn inverse_pd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| domain("matrix is not positive definite"))?;
    Ok(chol.inverse())
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub(crate) fn solve_pd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| domain("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

pub(crate) fn is_pd(a: &DMatrix<f64>) -> bool {
    a.nrows() == a.ncols() && a.clone().cholesky().is_some()
}

pub(crate) fn symmetric_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    a.clone().symmetric_eigenvalues()
}
