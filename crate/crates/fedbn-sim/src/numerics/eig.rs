//! Symmetric eigenvalues by cyclic Jacobi rotations.
//!
//! Each sweep annihilates every off-diagonal element once with a plane
//! rotation; the off-diagonal mass decays quadratically until the matrix is
//! numerically diagonal. Only eigenvalues are needed here, so rotations are
//! not accumulated. Sizes stay small (at most a few hundred), where Jacobi is
//! both robust and plenty fast.

use crate::error::{Error, Result};
use crate::numerics::matrix::DenseMatrix;

/// Matrices above this order are out of contract for this solver.
pub const MAX_EIG_SIZE: usize = 512;

const MAX_SWEEPS: usize = 100;

/// All eigenvalues of a symmetric matrix, sorted ascending.
///
/// The input is symmetrized as (A + Aᵀ)/2 first; a relative asymmetry above
/// 1e-10 is logged as a warning since it usually signals a caller bug.
pub fn sym_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "eigenvalues of non-square {}x{} matrix",
            a.rows, a.cols
        )));
    }
    if a.rows > MAX_EIG_SIZE {
        return Err(Error::InvalidArgument(format!(
            "matrix order {} exceeds solver limit {MAX_EIG_SIZE}",
            a.rows
        )));
    }
    let asym = a.max_rel_asymmetry();
    if asym > 1e-10 {
        log::warn!("symmetrizing matrix with relative asymmetry {asym:.3e}");
    }
    let mut work = a.symmetrized();
    let n = work.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![work.get(0, 0)]);
    }

    let scale = work.frobenius_norm().max(f64::MIN_POSITIVE);
    let tol = f64::EPSILON * scale;

    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                off += work.get(p, q).abs();
            }
        }
        if off <= tol {
            let mut eigs: Vec<f64> = (0..n).map(|i| work.get(i, i)).collect();
            eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            return Ok(eigs);
        }

        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = work.get(p, q);
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let app = work.get(p, p);
                let aqq = work.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                // smaller-angle root of t^2 + 2t*theta - 1 = 0
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                work.set(p, p, app - t * apq);
                work.set(q, q, aqq + t * apq);
                work.set(p, q, 0.0);
                work.set(q, p, 0.0);
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = work.get(r, p);
                    let arq = work.get(r, q);
                    let new_rp = arp - s * (arq + tau * arp);
                    let new_rq = arq + s * (arp - tau * arq);
                    work.set(r, p, new_rp);
                    work.set(p, r, new_rp);
                    work.set(r, q, new_rq);
                    work.set(q, r, new_rq);
                }
            }
        }
    }

    let mut off = 0.0;
    for p in 0..n - 1 {
        for q in (p + 1)..n {
            off += work.get(p, q).abs();
        }
    }
    Err(Error::NotConverged {
        sweeps: MAX_SWEEPS,
        off,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min(a: &DenseMatrix) -> Result<f64> {
    let eigs = sym_eigenvalues(a)?;
    eigs.first().copied().ok_or_else(|| {
        Error::InvalidArgument("minimal eigenvalue of an empty matrix".into())
    })
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_eig_max(a: &DenseMatrix) -> Result<f64> {
    let eigs = sym_eigenvalues(a)?;
    eigs.last().copied().ok_or_else(|| {
        Error::InvalidArgument("maximal eigenvalue of an empty matrix".into())
    })
}
