//! Cholesky factor and its directional derivative.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

/// Lower-triangular `P` with `P P' = s` and a positive diagonal.
pub fn cholesky_lower(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::Dimension(format!(
            "cholesky of a {}x{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Cholesky);
    }
    Cholesky::new(s.clone())
        .map(|c| c.unpack())
        .ok_or(Error::Cholesky)
}

/// Derivative of the Cholesky factor of `S` in direction `ds`.
///
/// Uses `dP = P Phi(P^{-1} dS P^{-T})`, where `Phi` keeps the strictly lower
/// triangle and half of the diagonal.
pub fn cholesky_derivative(p: &DMatrix<f64>, ds: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = p.nrows();
    if !p.is_square() || ds.shape() != (q, q) {
        return Err(Error::Dimension("cholesky derivative operands".into()));
    }
    if (0..q).any(|k| p[(k, k)] == 0.0 || !p[(k, k)].is_finite()) {
        return Err(Error::Cholesky);
    }
    let left = p.solve_lower_triangular(ds).ok_or(Error::Cholesky)?;
    let mut x = p
        .solve_lower_triangular(&left.transpose())
        .ok_or(Error::Cholesky)?;
    for j in 0..q {
        x[(j, j)] *= 0.5;
        for i in 0..j {
            x[(i, j)] = 0.0;
        }
    }
    Ok(p * x)
}
