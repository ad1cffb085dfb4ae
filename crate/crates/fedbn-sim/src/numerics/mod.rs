//! Linear-algebra and sampling substrate shared by every other module.

pub mod eig;
pub mod matrix;
pub mod rng;

pub use eig::{sym_eig_max, sym_eig_min, sym_eigenvalues, MAX_EIG_SIZE};
pub use matrix::{cholesky, dot, euclidean_norm, fmt_f64, DenseMatrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Covariance-weighted norm: sqrt(vᵀ S v) for symmetric positive definite S.
pub fn s_norm(v: &[f64], s: &DenseMatrix) -> Result<f64> {
    if !s.is_square() || s.rows != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "s_norm: vector of length {} against {}x{} matrix",
            v.len(),
            s.rows,
            s.cols
        )));
    }
    let sv = s.matvec(v)?;
    let quad = dot(v, &sv);
    if quad < 0.0 || !quad.is_finite() {
        return Err(Error::NotPositiveDefinite(format!(
            "vᵀSv = {quad:.3e}; weight matrix is not positive definite"
        )));
    }
    Ok(quad.sqrt())
}

/// Draw from N(mean, cov): mean + L·z with L the Cholesky factor of cov.
pub fn gaussian_sample(mean: &[f64], cov: &DenseMatrix, rng: &mut Rng) -> Result<Vec<f64>> {
    if !cov.is_square() || cov.rows != mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "gaussian_sample: mean of length {} against {}x{} covariance",
            mean.len(),
            cov.rows,
            cov.cols
        )));
    }
    let l = cholesky(cov)?;
    let z: Vec<f64> = (0..mean.len()).map(|_| rng.standard_normal()).collect();
    let mut out = mean.to_vec();
    for i in 0..mean.len() {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += l.get(i, j) * z[j];
        }
        out[i] += acc;
    }
    Ok(out)
}
