//! Small dense linear-algebra helpers shared by the modules: definiteness
//! checks, symmetric square roots, Cholesky factors and block copies.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance used for strict definiteness checks.
pub const DEFINITENESS_RTOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mut ev = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    ev.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Smallest eigenvalue of the symmetric part; `+inf` for an empty matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn spread(ev: &DVector<f64>) -> f64 {
    ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Positive definite with eigenvalues above `DEFINITENESS_RTOL` times the
/// largest absolute eigenvalue.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let ev = sym_eigenvalues(m);
    let scale = spread(&ev);
    scale > 0.0 && ev.iter().all(|&v| v > DEFINITENESS_RTOL * scale)
}

pub fn is_negative_definite(m: &DMatrix<f64>) -> bool {
    is_positive_definite(&(-m))
}

/// Positive semidefinite up to the same relative tolerance.
pub fn is_positive_semidefinite(m: &DMatrix<f64>) -> bool {
    let ev = sym_eigenvalues(m);
    let scale = spread(&ev);
    ev.iter().all(|&v| v >= -DEFINITENESS_RTOL * scale)
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |v| v.max(0.0).sqrt())
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inv_sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_positive_definite(m) {
        return Err(Error::Numerical("inverse square root of a non-PD matrix".into()));
    }
    Ok(spectral_map(m, |v| 1.0 / v.sqrt()))
}

/// Upper factor `U` with `UᵀU = m` (transpose of the Cholesky factor).
pub fn cholesky_upper(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Input("matrix is not positive definite".into()))?;
    Ok(chol.l().transpose())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn inverse_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// General inverse via LU; errors on singular input.
pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("matrix is singular".into()))
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    m.clone().svd(false, false).singular_values
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

/// Ratio of largest to smallest eigenvalue magnitude of a symmetric matrix.
pub fn condition_number_sym(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let hi = ev.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let lo = ev.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Condition number from singular values (2-norm).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    let hi = sv.iter().copied().fold(0.0, f64::max);
    let lo = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Copies `block` into `target` with its top-left corner at `(row, col)`.
pub fn set_block(target: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    if block.nrows() == 0 || block.ncols() == 0 {
        return;
    }
    target
        .view_mut((row, col), (block.nrows(), block.ncols()))
        .copy_from(block);
}

/// Writes `block` at `(row, col)` and its transpose at `(col, row)`.
pub fn set_sym_block(target: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    set_block(target, row, col, block);
    if row != col {
        set_block(target, col, row, &block.transpose());
    }
}

/// Rectangular identity (ones on the main diagonal).
pub fn rect_identity(rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::identity(rows, cols)
}

pub fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Input(format!(
            "{name} has shape {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn check_len(name: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Input(format!(
            "{name} has length {}, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}
