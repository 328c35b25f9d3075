//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value threshold used for numerical rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// If the plain factorization fails, the diagonal is shifted once by
/// `1e-12` times the mean diagonal magnitude and the factorization retried.
pub fn spd_factor(a: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(chol);
    }
    let n = a.nrows().max(1);
    let scale = (a.diagonal().abs().sum() / n as f64).max(1.0);
    let jittered = a + DMatrix::identity(a.nrows(), a.ncols()) * (1e-12 * scale);
    Cholesky::new(jittered).ok_or(Error::Singular(what))
}

pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    Ok(spd_factor(a, what)?.solve(b))
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    Ok(spd_factor(a, what)?.inverse())
}

/// Smallest eigenvalue of the symmetric part of `a`. Empty matrices report `+inf`.
pub fn sym_min_eig(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return f64::INFINITY;
    }
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn sym_max_eig(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

/// Number of singular values above `RANK_RTOL` times the largest one.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let largest = sv.max();
    if largest <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * largest).count()
}

/// Orthogonal projector onto the complement of the column space of `grad_g`:
/// `I - G (G^T G)^{-1} G^T`, or the identity when `grad_g` has no columns.
pub fn complement_projector(grad_g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = grad_g.nrows();
    if grad_g.ncols() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let gram = grad_g.transpose() * grad_g;
    let chol = Cholesky::new(gram).ok_or(Error::Singular("equality-gradient Gram matrix"))?;
    let k = chol.solve(&grad_g.transpose());
    Ok(DMatrix::identity(n, n) - grad_g * k)
}

/// Horizontal concatenation `[a, b]` of two matrices with equal row counts.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}
