//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetrize(m));
    let d = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|&v| f(v)));
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
}

/// `M^{1/2}` for `M ⪰ 0`; negative eigenvalues are clipped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_fn(m, |v| num_traits::Float::sqrt(v.max(0.0)))
}

/// `M^{-1/2}` for `M ≻ 0`, failing when the smallest eigenvalue is at or below `floor`.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let lo = min_eig(m);
    if lo <= floor {
        return Err(Error::DegenerateEllipsoid { min_eig: lo });
    }
    Ok(sym_fn(m, |v| 1.0 / num_traits::Float::sqrt(v)))
}

/// Spectral norm.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Numerical rank with singular-value threshold `rel * σ_max`.
pub fn rank(m: &DMatrix<f64>, rel: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let s = m.singular_values();
    let cut = rel * s.max();
    s.iter().filter(|&&v| v > cut).count()
}

/// Orthonormal basis of the null space of `m` (columns), via SVD.
pub fn null_space(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let cols = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    // pad to at least square so the full right singular basis is available
    let mut padded = DMatrix::zeros(m.nrows().max(cols), cols);
    padded.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let cut = if smax > 0.0 { rel * smax } else { f64::INFINITY };
    let keep: alloc::vec::Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] <= cut).collect();
    let mut out = DMatrix::zeros(cols, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &vt.row(i).transpose());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sqrt_roundtrip() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let r = sym_inv_sqrt(&a, 1e-10).unwrap();
        let i = &r * &a * &r;
        assert!((i - DMatrix::identity(3, 3)).norm() < 1e-12);
        assert!(sym_inv_sqrt(&DMatrix::zeros(2, 2), 1e-10).is_err());
    }

    #[test]
    fn null_space_of_rank_one() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let n = null_space(&m, 1e-12);
        assert_eq!(n.ncols(), 2);
        assert!((&m * &n).norm() < 1e-12);
        assert_eq!(rank(&m, 1e-9), 1);
    }
}
