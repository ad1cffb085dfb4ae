//! Spectral comparisons and dynamics checks built on the kernel matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    theory_forward_all, theory_grads, GammaMode, LossNorm, TheoryParams, TheorySample,
};
use crate::ntk::gram::{gram_finite, GramMatrix, GramVariant};
use crate::numerics::{sym_eig_min, DenseMatrix};

/// Minimal-eigenvalue comparison between a full kernel and its same-sample
/// block-restricted counterpart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralComparison {
    /// lambda_min of the full kernel.
    pub mu0: f64,
    /// lambda_min of the block-restricted kernel.
    pub mu0_star: f64,
    /// mu0_star >= mu0 (up to 1e-10 numerical slack).
    pub ordering_holds: bool,
    /// lambda_min of each client's diagonal block, ascending client order.
    pub per_block_minima: Vec<f64>,
    /// |mu0_star - min over blocks|; the block-diagonal identity.
    pub block_identity_gap: f64,
}

/// The block-restricted kernel keeps every same-client entry of the full one,
/// so its least eigenvalue is the minimum over the per-client blocks and can
/// only exceed the full kernel's least eigenvalue.
pub fn min_eig_compare(full: &GramMatrix, restricted: &GramMatrix) -> Result<SpectralComparison> {
    if full.size() != restricted.size() {
        return Err(Error::DimensionMismatch(format!(
            "kernel sizes {} vs {}",
            full.size(),
            restricted.size()
        )));
    }
    if full.sample_map != restricted.sample_map {
        return Err(Error::StructuralMismatch(
            "kernels were built over different sample lists".into(),
        ));
    }
    let mu0 = sym_eig_min(&full.entries)?;
    let mu0_star = sym_eig_min(&restricted.entries)?;
    let mut per_block_minima = Vec::new();
    for client in 0..full.n_clients() {
        let block = restricted.client_block(client)?;
        per_block_minima.push(sym_eig_min(&block)?);
    }
    let block_min = per_block_minima
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(SpectralComparison {
        mu0,
        mu0_star,
        ordering_holds: mu0_star >= mu0 - 1e-10,
        per_block_minima,
        block_identity_gap: (mu0_star - block_min).abs(),
    })
}

/// Full evolution kernel: V / alpha^2 + G.
pub fn lambda_matrix(v: &GramMatrix, g: &GramMatrix, alpha: f64) -> Result<DenseMatrix> {
    if v.sample_map != g.sample_map {
        return Err(Error::StructuralMismatch(
            "weight-path and scale-path kernels cover different samples".into(),
        ));
    }
    v.entries.scale(1.0 / (alpha * alpha)).add(&g.entries)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneStepReport {
    pub eta: f64,
    /// ||actual - predicted|| / ||actual|| over the prediction vector.
    pub relative_residual: f64,
    pub delta_norm: f64,
    pub predicted_norm: f64,
    /// Set when the actual prediction change vanishes and the residual is
    /// undefined.
    pub degenerate: bool,
}

/// Takes one gradient-descent step on (v, gamma) under the half-sum loss and
/// compares the realized prediction change against the kernel linearization
/// -eta * Lambda(0) * (f(0) - y).
pub fn one_step_ntk_check(
    params: &TheoryParams,
    samples: &[TheorySample],
    s_list: &[DenseMatrix],
    eta: f64,
    mode: GammaMode,
) -> Result<OneStepReport> {
    let (g_variant, v_variant) = match mode {
        GammaMode::Shared => (GramVariant::GAvg, GramVariant::VAvg),
        GammaMode::PerClient => (GramVariant::GBn, GramVariant::VBn),
    };
    let g = gram_finite(params, samples, s_list, g_variant)?;
    let v = gram_finite(params, samples, s_list, v_variant)?;
    let lambda = lambda_matrix(&v, &g, params.alpha)?;

    let f0 = theory_forward_all(params, samples, s_list)?;
    let residual: Vec<f64> = f0.iter().zip(samples).map(|(f, s)| f - s.y).collect();
    let predicted: Vec<f64> = lambda.matvec(&residual)?.iter().map(|t| -eta * t).collect();

    let grads = theory_grads(params, samples, s_list, LossNorm::HalfSum, mode)?;
    let mut stepped = params.clone();
    for i in 0..stepped.v.entries.len() {
        stepped.v.entries[i] -= eta * grads.d_v.entries[i];
    }
    for i in 0..stepped.gamma.entries.len() {
        stepped.gamma.entries[i] -= eta * grads.d_gamma.entries[i];
    }
    let f1 = theory_forward_all(&stepped, samples, s_list)?;

    let mut diff_sq = 0.0;
    let mut delta_sq = 0.0;
    let mut predicted_sq = 0.0;
    for p in 0..samples.len() {
        let actual = f1[p] - f0[p];
        let gap = actual - predicted[p];
        diff_sq += gap * gap;
        delta_sq += actual * actual;
        predicted_sq += predicted[p] * predicted[p];
    }
    let delta_norm = delta_sq.sqrt();
    let degenerate = delta_norm < 1e-14;
    Ok(OneStepReport {
        eta,
        relative_residual: if degenerate { f64::NAN } else { diff_sq.sqrt() / delta_norm },
        delta_norm,
        predicted_norm: predicted_sq.sqrt(),
        degenerate,
    })
}

/// Full-batch gradient descent on the analytic network, recording the squared
/// prediction residual ||f(t) - y||^2 at every step (index 0 is the
/// initialization).
pub fn gd_residual_trace(
    params: &TheoryParams,
    samples: &[TheorySample],
    s_list: &[DenseMatrix],
    eta: f64,
    steps: usize,
    mode: GammaMode,
) -> Result<Vec<f64>> {
    let mut current = params.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let preds = theory_forward_all(&current, samples, s_list)?;
        let res_sq: f64 = preds
            .iter()
            .zip(samples)
            .map(|(f, s)| (f - s.y) * (f - s.y))
            .sum();
        trace.push(res_sq);
        let grads = theory_grads(&current, samples, s_list, LossNorm::HalfSum, mode)?;
        for i in 0..current.v.entries.len() {
            current.v.entries[i] -= eta * grads.d_v.entries[i];
        }
        for i in 0..current.gamma.entries.len() {
            current.gamma.entries[i] -= eta * grads.d_gamma.entries[i];
        }
    }
    trace.truncate(steps + 1);
    Ok(trace)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    pub eta: f64,
    pub mu_est: f64,
    pub tol: f64,
    /// Bound holds at every recorded step.
    pub holds: bool,
    pub first_violation: Option<usize>,
    /// mu_est <= 0: the geometric bound degenerates to a non-increase check.
    pub degenerate_mu: bool,
    pub checked_steps: usize,
}

/// Checks the geometric decay bound
/// trace[t] <= (1 - eta * mu_est / 2)^t * trace[0] * (1 + tol) at every step.
pub fn linear_decay_fit(trace: &[f64], eta: f64, mu_est: f64, tol: f64) -> DecayFit {
    let degenerate_mu = mu_est <= 0.0;
    let rate = if degenerate_mu { 1.0 } else { 1.0 - eta * mu_est / 2.0 };
    let base = trace.first().copied().unwrap_or(0.0);
    let mut first_violation = None;
    let mut bound = base * (1.0 + tol);
    for (t, &value) in trace.iter().enumerate() {
        if t > 0 {
            bound *= rate;
        }
        if value > bound {
            first_violation = Some(t);
            break;
        }
    }
    DecayFit {
        eta,
        mu_est,
        tol,
        holds: first_violation.is_none(),
        first_violation,
        degenerate_mu,
        checked_steps: trace.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_theory;
    use crate::numerics::Rng;

    fn identity_list(n: usize, d: usize) -> Vec<DenseMatrix> {
        (0..n).map(|_| DenseMatrix::identity(d)).collect()
    }

    fn make_samples(rng: &mut Rng, n: usize, per_client: usize, d: usize) -> Vec<TheorySample> {
        let mut samples = Vec::new();
        for client in 0..n {
            for _ in 0..per_client {
                samples.push(TheorySample {
                    x: (0..d).map(|_| rng.standard_normal()).collect(),
                    y: 0.5 * rng.standard_normal(),
                    client,
                });
            }
        }
        samples
    }

    #[test]
    fn hand_built_block_example_matches_quadratic_oracle() {
        // full = [[A, B], [Bᵀ, C]] with A = [[2,1],[1,2]], C = diag(3,5),
        // B = 0.5 I; blocks have minima 1 and 3
        let full_entries = DenseMatrix::from_rows(&[
            vec![2.0, 1.0, 0.5, 0.0],
            vec![1.0, 2.0, 0.0, 0.5],
            vec![0.5, 0.0, 3.0, 0.0],
            vec![0.0, 0.5, 0.0, 5.0],
        ])
        .unwrap();
        let map = vec![
            super::super::gram::SampleRef { client: 0, local_index: 0 },
            super::super::gram::SampleRef { client: 0, local_index: 1 },
            super::super::gram::SampleRef { client: 1, local_index: 0 },
            super::super::gram::SampleRef { client: 1, local_index: 1 },
        ];
        let mut restricted_entries = full_entries.clone();
        for p in 0..4 {
            for q in 0..4 {
                if map[p].client != map[q].client {
                    restricted_entries.set(p, q, 0.0);
                }
            }
        }
        let full = GramMatrix {
            entries: full_entries,
            sample_map: map.clone(),
            variant: GramVariant::GAvg,
        };
        let restricted = GramMatrix {
            entries: restricted_entries,
            sample_map: map,
            variant: GramVariant::GBn,
        };
        let report = min_eig_compare(&full, &restricted).unwrap();
        assert!((report.per_block_minima[0] - 1.0).abs() < 1e-12);
        assert!((report.per_block_minima[1] - 3.0).abs() < 1e-12);
        assert!((report.mu0_star - 1.0).abs() < 1e-12);
        assert!(report.ordering_holds);
        assert!(report.block_identity_gap < 1e-12);
        assert!(report.mu0 <= report.mu0_star + 1e-12);
    }

    #[test]
    fn single_client_comparison_is_exact_equality() {
        let mut rng = Rng::new(70);
        let samples = make_samples(&mut rng, 1, 4, 3);
        let params = init_theory(16, 3, 1, 1.0, &mut rng);
        let s = identity_list(1, 3);
        let full = gram_finite(&params, &samples, &s, GramVariant::GAvg).unwrap();
        let restricted = gram_finite(&params, &samples, &s, GramVariant::GBn).unwrap();
        let report = min_eig_compare(&full, &restricted).unwrap();
        assert_eq!(report.mu0, report.mu0_star);
    }

    #[test]
    fn lambda_min_dominates_component_minima() {
        let mut rng = Rng::new(71);
        let samples = make_samples(&mut rng, 2, 3, 4);
        let params = init_theory(32, 4, 2, 1.5, &mut rng);
        let s = identity_list(2, 4);
        let g = gram_finite(&params, &samples, &s, GramVariant::GAvg).unwrap();
        let v = gram_finite(&params, &samples, &s, GramVariant::VAvg).unwrap();
        let lambda = lambda_matrix(&v, &g, params.alpha).unwrap();
        let lambda_min = sym_eig_min(&lambda).unwrap();
        let g_min = sym_eig_min(&g.entries).unwrap();
        let v_min = sym_eig_min(&v.entries).unwrap() / (params.alpha * params.alpha);
        assert!(lambda_min >= g_min.max(v_min) - 1e-10);
    }

    #[test]
    fn one_step_residual_is_small_and_shrinks_with_eta() {
        let mut rng = Rng::new(72);
        let samples = make_samples(&mut rng, 2, 3, 5);
        let params = init_theory(1024, 5, 2, 2.0, &mut rng);
        let s = identity_list(2, 5);
        for mode in [GammaMode::Shared, GammaMode::PerClient] {
            let coarse = one_step_ntk_check(&params, &samples, &s, 1e-3, mode).unwrap();
            let fine = one_step_ntk_check(&params, &samples, &s, 1e-4, mode).unwrap();
            assert!(!coarse.degenerate);
            assert!(coarse.relative_residual < 0.1, "{:?}", coarse);
            assert!(fine.relative_residual < coarse.relative_residual);
        }
    }

    #[test]
    fn one_step_flags_zero_residual_configuration() {
        let mut rng = Rng::new(73);
        let mut samples = make_samples(&mut rng, 1, 3, 3);
        let params = init_theory(8, 3, 1, 1.0, &mut rng);
        let s = identity_list(1, 3);
        let preds = theory_forward_all(&params, &samples, &s).unwrap();
        for (sample, pred) in samples.iter_mut().zip(preds) {
            sample.y = pred;
        }
        let report = one_step_ntk_check(&params, &samples, &s, 1e-4, GammaMode::Shared).unwrap();
        assert!(report.degenerate);
    }

    #[test]
    fn decay_bound_holds_on_simulated_descent() {
        let mut rng = Rng::new(74);
        let samples = make_samples(&mut rng, 2, 3, 4);
        let params = init_theory(1024, 4, 2, 2.0, &mut rng);
        let s = identity_list(2, 4);
        let g = gram_finite(&params, &samples, &s, GramVariant::GAvg).unwrap();
        let v = gram_finite(&params, &samples, &s, GramVariant::VAvg).unwrap();
        let lambda = lambda_matrix(&v, &g, params.alpha).unwrap();
        let mu = sym_eig_min(&lambda).unwrap();
        let eta = 0.5 / crate::numerics::sym_eig_max(&lambda).unwrap();
        let trace = gd_residual_trace(&params, &samples, &s, eta, 60, GammaMode::Shared).unwrap();
        assert!(trace[60] < trace[0]);
        let fit = linear_decay_fit(&trace, eta, mu, 0.05);
        assert!(fit.holds, "first violation at {:?}", fit.first_violation);
        assert!(!fit.degenerate_mu);
    }

    #[test]
    fn degenerate_mu_reduces_to_non_increase_check() {
        let trace = vec![4.0, 3.9, 3.95, 3.9];
        let fit = linear_decay_fit(&trace, 1e-2, -0.5, 0.05);
        assert!(fit.degenerate_mu);
        assert!(fit.holds);
        let fit = linear_decay_fit(&[1.0, 1.2], 1e-2, 0.0, 0.05);
        assert!(fit.degenerate_mu);
        assert!(!fit.holds);
        assert_eq!(fit.first_violation, Some(1));
    }
}
