//! Two-layer normalized ReLU network with analytic gradients.
//!
//! The network maps x to (1/sqrt(m)) * sum_k c_k * relu(gamma_{k,i} * v_k.x /
//! ||v_k||_{S_i}) where i is the client the sample belongs to and S_i its
//! feature covariance. The scale column gamma[., i] plays the role of a local
//! batch-norm parameter; tying all columns together recovers the
//! shared-normalization (FedAvg) special case. Top-layer signs c stay frozen
//! after initialization; only v and gamma are trained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, euclidean_norm, DenseMatrix, Rng};

/// Parameters of the normalized two-layer network, with one scale column per
/// client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryParams {
    /// First-layer weights, one row per neuron (m x d).
    pub v: DenseMatrix,
    /// Normalization scales, entry (k, i) for neuron k on client i (m x N).
    pub gamma: DenseMatrix,
    /// Frozen top-layer signs in {-1, +1}.
    pub c: Vec<f64>,
    /// Initialization scale of the first layer.
    pub alpha: f64,
}

/// One labeled sample tagged with its owning client.
#[derive(Debug, Clone)]
pub struct TheorySample {
    pub x: Vec<f64>,
    pub y: f64,
    pub client: usize,
}

/// Loss convention for gradient computation.
///
/// `HalfSum` is (1/2) * sum of squared residuals, the convention under which
/// the kernel dynamics take their clean form; `Mean` is the averaged squared
/// loss used by the training engine. They differ only by a constant factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    HalfSum,
    Mean,
}

/// Whether the scale columns are tied across clients (shared normalization,
/// the FedAvg case) or free per client (local normalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    Shared,
    PerClient,
}

/// Gradients with respect to `v` (m x d) and `gamma` (m x N).
#[derive(Debug, Clone)]
pub struct TheoryGrads {
    pub d_v: DenseMatrix,
    pub d_gamma: DenseMatrix,
}

/// Random initialization: v_k ~ N(0, alpha^2 I), c_k uniform on {-1, +1},
/// and every gamma_{k,i} = ||v_k||_2 / alpha.
pub fn init_theory(m: usize, d: usize, n_clients: usize, alpha: f64, rng: &mut Rng) -> TheoryParams {
    assert!(m >= 1 && d >= 1 && n_clients >= 1);
    assert!(alpha > 0.0, "alpha must be positive");
    let v = DenseMatrix::from_fn(m, d, |_, _| alpha * rng.standard_normal());
    let c: Vec<f64> = (0..m).map(|_| rng.pm_one()).collect();
    let mut gamma = DenseMatrix::zeros(m, n_clients);
    for k in 0..m {
        let scale = euclidean_norm(v.row(k)) / alpha;
        for i in 0..n_clients {
            gamma.set(k, i, scale);
        }
    }
    TheoryParams { v, gamma, c, alpha }
}

impl TheoryParams {
    pub fn width(&self) -> usize {
        self.v.rows
    }

    pub fn dim(&self) -> usize {
        self.v.cols
    }

    pub fn n_clients(&self) -> usize {
        self.gamma.cols
    }

    /// Per-client slice of the parameters for the federated engine.
    pub fn client_view(&self, client: usize) -> TheoryClientParams {
        TheoryClientParams {
            v: self.v.clone(),
            gamma: (0..self.width()).map(|k| self.gamma.get(k, client)).collect(),
            c: self.c.clone(),
            alpha: self.alpha,
        }
    }
}

/// Covariance-weighted norms ||v_k||_{S_i}, precomputed once per evaluation.
pub(crate) struct SNorms {
    norms: DenseMatrix, // m x N
}

impl SNorms {
    pub(crate) fn compute(params: &TheoryParams, s_list: &[DenseMatrix]) -> Result<Self> {
        if s_list.len() != params.n_clients() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariance matrices for {} clients",
                s_list.len(),
                params.n_clients()
            )));
        }
        let mut norms = DenseMatrix::zeros(params.width(), s_list.len());
        for k in 0..params.width() {
            let vk = params.v.row(k);
            for (i, s) in s_list.iter().enumerate() {
                let n = crate::numerics::s_norm(vk, s)?;
                if n < 1e-300 {
                    return Err(Error::InvalidArgument(format!(
                        "neuron {k} has vanishing covariance norm on client {i}"
                    )));
                }
                norms.set(k, i, n);
            }
        }
        Ok(Self { norms })
    }

    #[inline]
    pub(crate) fn get(&self, k: usize, i: usize) -> f64 {
        self.norms.get(k, i)
    }
}

/// Network output for a single sample belonging to `client`.
pub fn theory_forward(
    params: &TheoryParams,
    x: &[f64],
    client: usize,
    s_list: &[DenseMatrix],
) -> Result<f64> {
    if client >= params.n_clients() {
        return Err(Error::InvalidArgument(format!(
            "client {client} out of range ({} clients)",
            params.n_clients()
        )));
    }
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "sample dimension {} vs model dimension {}",
            x.len(),
            params.dim()
        )));
    }
    let s = &s_list[client];
    let scale = 1.0 / (params.width() as f64).sqrt();
    let mut acc = 0.0;
    for k in 0..params.width() {
        let vk = params.v.row(k);
        let norm = crate::numerics::s_norm(vk, s)?;
        if norm < 1e-300 {
            return Err(Error::InvalidArgument(format!(
                "neuron {k} has vanishing covariance norm"
            )));
        }
        let pre = params.gamma.get(k, client) * dot(vk, x) / norm;
        if pre > 0.0 {
            acc += params.c[k] * pre;
        }
    }
    Ok(scale * acc)
}

/// Outputs for an ordered sample list, sharing the norm precomputation.
pub fn theory_forward_all(
    params: &TheoryParams,
    samples: &[TheorySample],
    s_list: &[DenseMatrix],
) -> Result<Vec<f64>> {
    let norms = SNorms::compute(params, s_list)?;
    forward_with_norms(params, samples, &norms)
}

pub(crate) fn forward_with_norms(
    params: &TheoryParams,
    samples: &[TheorySample],
    norms: &SNorms,
) -> Result<Vec<f64>> {
    let scale = 1.0 / (params.width() as f64).sqrt();
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.client >= params.n_clients() {
            return Err(Error::InvalidArgument(format!(
                "sample client {} out of range",
                sample.client
            )));
        }
        let mut acc = 0.0;
        for k in 0..params.width() {
            let pre = params.gamma.get(k, sample.client) * dot(params.v.row(k), &sample.x)
                / norms.get(k, sample.client);
            if pre > 0.0 {
                acc += params.c[k] * pre;
            }
        }
        out.push(scale * acc);
    }
    Ok(out)
}

/// Squared loss over the sample list under the given convention.
pub fn theory_loss(
    params: &TheoryParams,
    samples: &[TheorySample],
    s_list: &[DenseMatrix],
    norm: LossNorm,
) -> Result<f64> {
    let preds = theory_forward_all(params, samples, s_list)?;
    let sum_sq: f64 = preds
        .iter()
        .zip(samples)
        .map(|(f, s)| (f - s.y) * (f - s.y))
        .sum();
    Ok(match norm {
        LossNorm::HalfSum => 0.5 * sum_sq,
        LossNorm::Mean => sum_sq / samples.len() as f64,
    })
}

/// Analytic gradients of the squared loss with respect to v and gamma.
///
/// The v-gradient routes through the projected feature
/// x_perp = (I - S u uᵀ / ||u||_S^2) x with u = v_k, which is Euclidean-
/// orthogonal to v_k (the normalized pre-activation is scale-invariant in
/// v_k). Under `GammaMode::Shared` the per-client gamma gradients collapse by
/// summation and every column of `d_gamma` carries the collapsed value, so a
/// gradient step keeps the columns tied.
pub fn theory_grads(
    params: &TheoryParams,
    samples: &[TheorySample],
    s_list: &[DenseMatrix],
    norm: LossNorm,
    mode: GammaMode,
) -> Result<TheoryGrads> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("gradient of empty sample list".into()));
    }
    let norms = SNorms::compute(params, s_list)?;
    let preds = forward_with_norms(params, samples, &norms)?;
    let loss_scale = match norm {
        LossNorm::HalfSum => 1.0,
        LossNorm::Mean => 2.0 / samples.len() as f64,
    };
    let residuals: Vec<f64> = preds
        .iter()
        .zip(samples)
        .map(|(f, s)| loss_scale * (f - s.y))
        .collect();

    let (m, d, n) = (params.width(), params.dim(), params.n_clients());
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let mut d_v = DenseMatrix::zeros(m, d);
    let mut d_gamma = DenseMatrix::zeros(m, n);
    let mut s_v = vec![vec![0.0; d]; n];

    for k in 0..m {
        let vk = params.v.row(k);
        let ck = params.c[k];
        for (i, s) in s_list.iter().enumerate() {
            s_v[i] = s.matvec(vk)?;
        }
        let dvk = d_v.row_mut(k);
        for (q, sample) in samples.iter().enumerate() {
            let i = sample.client;
            let vx = dot(vk, &sample.x);
            if vx < 0.0 {
                continue;
            }
            let norm_ki = norms.get(k, i);
            let common = residuals[q] * ck * inv_sqrt_m / norm_ki;
            // d f_q / d gamma_{k,i} = c_k * relu(v_k.x_q) / (sqrt(m) * ||v_k||_{S_i})
            d_gamma.set(k, i, d_gamma.get(k, i) + common * vx);
            // d f_q / d v_k = c_k * gamma_{k,i} / (sqrt(m) * ||v_k||_{S_i}) * x_perp
            let coeff = common * params.gamma.get(k, i);
            let proj_scale = vx / (norm_ki * norm_ki);
            for c in 0..d {
                dvk[c] += coeff * (sample.x[c] - proj_scale * s_v[i][c]);
            }
        }
    }

    if mode == GammaMode::Shared {
        for k in 0..m {
            let total: f64 = (0..n).map(|i| d_gamma.get(k, i)).sum();
            for i in 0..n {
                d_gamma.set(k, i, total);
            }
        }
    }

    Ok(TheoryGrads { d_v, d_gamma })
}

/// Projected feature (I - S u uᵀ / ||u||_S^2) x for u = v.
pub fn projected_feature(x: &[f64], v: &[f64], s: &DenseMatrix) -> Result<Vec<f64>> {
    let sv = s.matvec(v)?;
    let norm_sq = dot(v, &sv);
    if norm_sq <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "||v||_S^2 = {norm_sq:.3e} in feature projection"
        )));
    }
    let vx = dot(v, x);
    Ok(x.iter()
        .zip(&sv)
        .map(|(xc, svc)| xc - svc * vx / norm_sq)
        .collect())
}

/// Per-client slice of [`TheoryParams`] held by one federated client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryClientParams {
    pub v: DenseMatrix,
    pub gamma: Vec<f64>,
    pub c: Vec<f64>,
    pub alpha: f64,
}

impl TheoryClientParams {
    pub fn width(&self) -> usize {
        self.v.rows
    }

    /// Prediction for one sample using this client's own scales and covariance.
    pub fn forward(&self, x: &[f64], s: &DenseMatrix) -> Result<f64> {
        let scale = 1.0 / (self.width() as f64).sqrt();
        let mut acc = 0.0;
        for k in 0..self.width() {
            let vk = self.v.row(k);
            let norm = crate::numerics::s_norm(vk, s)?;
            if norm < 1e-300 {
                return Err(Error::InvalidArgument(format!(
                    "neuron {k} has vanishing covariance norm"
                )));
            }
            let pre = self.gamma[k] * dot(vk, x) / norm;
            if pre > 0.0 {
                acc += self.c[k] * pre;
            }
        }
        Ok(scale * acc)
    }

    /// Mean-squared-loss gradients over a batch of rows from this client.
    /// Returns (d_v, d_gamma, batch loss, predictions).
    pub fn batch_grads(
        &self,
        features: &DenseMatrix,
        labels: &[f64],
        rows: &[usize],
        s: &DenseMatrix,
    ) -> Result<(DenseMatrix, Vec<f64>, f64, Vec<f64>)> {
        let (m, d) = (self.width(), self.v.cols);
        let mut norms = Vec::with_capacity(m);
        let mut s_v = Vec::with_capacity(m);
        for k in 0..m {
            let vk = self.v.row(k);
            let sv = s.matvec(vk)?;
            let quad = dot(vk, &sv);
            if quad <= 0.0 {
                return Err(Error::NotPositiveDefinite(format!(
                    "||v_{k}||_S^2 = {quad:.3e}"
                )));
            }
            norms.push(quad.sqrt());
            s_v.push(sv);
        }
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        let mut preds = Vec::with_capacity(rows.len());
        for &r in rows {
            let x = features.row(r);
            let mut acc = 0.0;
            for k in 0..m {
                let pre = self.gamma[k] * dot(self.v.row(k), x) / norms[k];
                if pre > 0.0 {
                    acc += self.c[k] * pre;
                }
            }
            preds.push(inv_sqrt_m * acc);
        }
        let batch = rows.len() as f64;
        let loss = preds
            .iter()
            .zip(rows)
            .map(|(f, &r)| (f - labels[r]) * (f - labels[r]))
            .sum::<f64>()
            / batch;

        let mut d_v = DenseMatrix::zeros(m, d);
        let mut d_gamma = vec![0.0; m];
        for (idx, &r) in rows.iter().enumerate() {
            let x = features.row(r);
            let resid = 2.0 * (preds[idx] - labels[r]) / batch;
            for k in 0..m {
                let vx = dot(self.v.row(k), x);
                if vx < 0.0 {
                    continue;
                }
                let common = resid * self.c[k] * inv_sqrt_m / norms[k];
                d_gamma[k] += common * vx;
                let coeff = common * self.gamma[k];
                let proj_scale = vx / (norms[k] * norms[k]);
                let dvk = d_v.row_mut(k);
                for c in 0..d {
                    dvk[c] += coeff * (x[c] - proj_scale * s_v[k][c]);
                }
            }
        }
        Ok((d_v, d_gamma, loss, preds))
    }
}

/// Reassembles the global m x N view from per-client slices (shared v and c
/// are taken from the first client).
pub fn assemble_theory_params(clients: &[TheoryClientParams]) -> Result<TheoryParams> {
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client parameters".into()))?;
    let m = first.width();
    let mut gamma = DenseMatrix::zeros(m, clients.len());
    for (i, cp) in clients.iter().enumerate() {
        if cp.width() != m {
            return Err(Error::StructuralMismatch(format!(
                "client {i} has width {} vs {m}",
                cp.width()
            )));
        }
        for k in 0..m {
            gamma.set(k, i, cp.gamma[k]);
        }
    }
    Ok(TheoryParams {
        v: first.v.clone(),
        gamma,
        c: first.c.clone(),
        alpha: first.alpha,
    })
}
