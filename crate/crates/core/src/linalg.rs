// Small dense-matrix helpers shared by the numeric modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue floor used for every positive-definiteness decision.
pub(crate) const PD_REL_THRESHOLD: f64 = 1e-10;

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Extreme eigenvalues of `(m + mᵗ)/2` as `(min, max)`.
pub(crate) fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// `true` when the symmetrised matrix has all eigenvalues above
/// `PD_REL_THRESHOLD` times the largest one.
pub(crate) fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let (min, max) = sym_eig_range(m);
    max > 0.0 && min > PD_REL_THRESHOLD * max
}

/// Symmetric PSD square root through the spectral decomposition.
pub(crate) fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(m, 0.5)
}

/// `m^{power}` for a symmetric positive definite `m`.
pub(crate) fn sym_power(m: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Spectral (operator 2-) norm.
pub(crate) fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Copies `block` into `dst` with its top-left corner at block coordinates
/// `(row, col)` of a grid of `size × size` blocks.
pub(crate) fn set_block(dst: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    let (r, c) = block.shape();
    dst.view_mut((row * r, col * c), (r, c)).copy_from(block);
}

pub(crate) fn block_diag(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let d = block.nrows();
    let mut out = DMatrix::zeros(d * copies, d * copies);
    for i in 0..copies {
        set_block(&mut out, i, i, block);
    }
    out
}

pub(crate) fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Row-major nested vectors, the layout used in every JSON output.
pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Decimal rendering with 17 significant digits, used for every CSV cell.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Diagonal matrix from its entries.
pub fn diag(entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sym_sqrt(&m);
        assert!(max_abs(&(&r * &r - &m)) < 1e-12);
        let inv_r = sym_power(&m, -0.5);
        assert!(max_abs(&(&inv_r * &r - DMatrix::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn pd_threshold() {
        assert!(is_positive_definite(&DMatrix::identity(2, 2)));
        assert!(!is_positive_definite(&DMatrix::from_diagonal_element(2, 2, 0.0)));
        let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        assert!(!is_positive_definite(&nearly));
    }

    #[test]
    fn op_norm_of_diag() {
        let m = DMatrix::from_row_slice(2, 2, &[-3.0, 0.0, 0.0, 2.0]);
        assert!((op_norm(&m) - 3.0).abs() < 1e-12);
    }
}
