//! Kernel Gram matrices over the pooled sample set.
//!
//! Two families are built here. The finite-width matrices read the current
//! network parameters: G couples samples through the scale path,
//! V through the weight path (projected features), and each has a
//! local-normalization variant whose scale coupling is restricted to samples
//! of the same client. The auxiliary matrices are expectations over the
//! initialization distribution v ~ N(0, alpha^2 I), estimated by Monte Carlo
//! with draws shared between the full and block variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::theory::SNorms;
use crate::model::{TheoryParams, TheorySample};
use crate::numerics::{dot, DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramVariant {
    /// Scale-path kernel, shared normalization: couples all sample pairs.
    GAvg,
    /// Scale-path kernel, local normalization: same-client pairs only.
    GBn,
    /// Weight-path kernel, shared scales.
    VAvg,
    /// Weight-path kernel, per-client scales.
    VBn,
}

/// Row identity inside a pooled, client-ordered sample list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub client: usize,
    pub local_index: usize,
}

/// Symmetric kernel matrix over pooled samples, rows grouped contiguously by
/// ascending client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramMatrix {
    pub entries: DenseMatrix,
    pub sample_map: Vec<SampleRef>,
    pub variant: GramVariant,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.entries.rows
    }

    pub fn n_clients(&self) -> usize {
        self.sample_map.last().map_or(0, |s| s.client + 1)
    }

    /// Row ranges per client, in ascending client order.
    pub fn block_bounds(&self) -> Vec<std::ops::Range<usize>> {
        let mut bounds = Vec::new();
        let mut start = 0;
        for p in 1..=self.sample_map.len() {
            if p == self.sample_map.len() || self.sample_map[p].client != self.sample_map[start].client
            {
                bounds.push(start..p);
                start = p;
            }
        }
        bounds
    }

    /// Principal block of one client.
    pub fn client_block(&self, client: usize) -> Result<DenseMatrix> {
        let indices: Vec<usize> = self
            .sample_map
            .iter()
            .enumerate()
            .filter(|(_, s)| s.client == client)
            .map(|(p, _)| p)
            .collect();
        if indices.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no samples for client {client}"
            )));
        }
        self.entries.principal_submatrix(&indices)
    }

    /// Rows whose diagonal entry is numerically zero (the sample activates
    /// almost no neuron); reported alongside eigenvalue comparisons.
    pub fn degenerate_diagonal(&self) -> Vec<usize> {
        (0..self.size())
            .filter(|&p| self.entries.get(p, p) < 1e-8)
            .collect()
    }
}

fn check_ordering(samples: &[TheorySample]) -> Result<Vec<SampleRef>> {
    let mut map = Vec::with_capacity(samples.len());
    let mut previous = 0usize;
    let mut local = 0usize;
    for (row, sample) in samples.iter().enumerate() {
        if row > 0 {
            if sample.client < previous {
                return Err(Error::SampleOrdering {
                    row,
                    found: sample.client,
                    previous,
                });
            }
            if sample.client != previous {
                local = 0;
            }
        }
        map.push(SampleRef {
            client: sample.client,
            local_index: local,
        });
        local += 1;
        previous = sample.client;
    }
    Ok(map)
}

/// Exact finite-width kernel at the current parameters.
pub fn gram_finite(
    params: &TheoryParams,
    samples: &[TheorySample],
    s_list: &[DenseMatrix],
    variant: GramVariant,
) -> Result<GramMatrix> {
    let map = check_ordering(samples)?;
    let norms = SNorms::compute(params, s_list)?;
    let (m, nm) = (params.width(), samples.len());
    let inv_m = 1.0 / m as f64;
    let alpha_sq = params.alpha * params.alpha;

    // per-neuron activations sigma(v_k . x_p) shared by both kernel families
    let mut act = DenseMatrix::zeros(m, nm);
    for k in 0..m {
        let vk = params.v.row(k);
        for (p, sample) in samples.iter().enumerate() {
            act.set(k, p, dot(vk, &sample.x));
        }
    }

    let mut entries = DenseMatrix::zeros(nm, nm);
    match variant {
        GramVariant::GAvg | GramVariant::GBn => {
            for p in 0..nm {
                let ip = map[p].client;
                for q in p..nm {
                    let iq = map[q].client;
                    if variant == GramVariant::GBn && ip != iq {
                        continue;
                    }
                    let mut acc = 0.0;
                    for k in 0..m {
                        let ap = act.get(k, p);
                        if ap <= 0.0 {
                            continue;
                        }
                        let aq = act.get(k, q);
                        if aq <= 0.0 {
                            continue;
                        }
                        let ck = params.c[k];
                        acc += ck * ck * ap * aq / (norms.get(k, ip) * norms.get(k, iq));
                    }
                    let value = inv_m * acc;
                    entries.set(p, q, value);
                    entries.set(q, p, value);
                }
            }
        }
        GramVariant::VAvg | GramVariant::VBn => {
            // projected features per (k, p): x_p - S_{i_p} v_k (v_k.x_p) / ||v_k||_{S_ip}^2
            let d = params.dim();
            let mut proj = vec![0.0; m * nm * d];
            for k in 0..m {
                let vk = params.v.row(k);
                let mut s_v: Vec<Vec<f64>> = Vec::with_capacity(s_list.len());
                for s in s_list {
                    s_v.push(s.matvec(vk)?);
                }
                for (p, sample) in samples.iter().enumerate() {
                    let ip = map[p].client;
                    let vx = act.get(k, p);
                    let norm = norms.get(k, ip);
                    let scale = vx / (norm * norm);
                    let base = (k * nm + p) * d;
                    for c in 0..d {
                        proj[base + c] = sample.x[c] - scale * s_v[ip][c];
                    }
                }
            }
            for p in 0..nm {
                let ip = map[p].client;
                for q in p..nm {
                    let iq = map[q].client;
                    let mut acc = 0.0;
                    for k in 0..m {
                        if act.get(k, p) < 0.0 || act.get(k, q) < 0.0 {
                            continue;
                        }
                        let (gp, gq) = match variant {
                            GramVariant::VAvg => (params.gamma.get(k, 0), params.gamma.get(k, 0)),
                            GramVariant::VBn => {
                                (params.gamma.get(k, ip), params.gamma.get(k, iq))
                            }
                            _ => unreachable!(),
                        };
                        let ck = params.c[k];
                        let pp = &proj[(k * nm + p) * d..(k * nm + p + 1) * d];
                        let pq = &proj[(k * nm + q) * d..(k * nm + q + 1) * d];
                        acc += alpha_sq * ck * ck * gp * gq * dot(pp, pq)
                            / (norms.get(k, ip) * norms.get(k, iq));
                    }
                    let value = inv_m * acc;
                    entries.set(p, q, value);
                    entries.set(q, p, value);
                }
            }
        }
    }
    Ok(GramMatrix {
        entries,
        sample_map: map,
        variant,
    })
}

/// Monte-Carlo estimate of the auxiliary kernel
/// E_{v ~ N(0, alpha^2 I)} relu(v.x_p) relu(v.x_q), optionally restricted to
/// same-client pairs. Calling both variants with the same seed reuses the
/// identical draw sequence, so the restricted estimate is exactly the
/// block-diagonal part of the full one.
pub fn gram_aux_mc(
    samples: &[TheorySample],
    alpha: f64,
    k_draws: usize,
    rng: &mut Rng,
    variant: GramVariant,
) -> Result<GramMatrix> {
    if !matches!(variant, GramVariant::GAvg | GramVariant::GBn) {
        return Err(Error::InvalidArgument(
            "auxiliary kernels exist only for the scale path (GAvg / GBn)".into(),
        ));
    }
    if k_draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let map = check_ordering(samples)?;
    let nm = samples.len();
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut acc = DenseMatrix::zeros(nm, nm);
    let mut v = vec![0.0; d];
    let mut activations = vec![0.0; nm];
    let mut active: Vec<usize> = Vec::with_capacity(nm);
    for _ in 0..k_draws {
        for vc in &mut v {
            *vc = alpha * rng.standard_normal();
        }
        active.clear();
        for (p, sample) in samples.iter().enumerate() {
            let a = dot(&v, &sample.x);
            activations[p] = a;
            if a > 0.0 {
                active.push(p);
            }
        }
        for (i, &p) in active.iter().enumerate() {
            let ap = activations[p];
            for &q in &active[i..] {
                acc.set(p, q, acc.get(p, q) + ap * activations[q]);
            }
        }
    }
    let inv_k = 1.0 / k_draws as f64;
    let mut entries = DenseMatrix::zeros(nm, nm);
    for p in 0..nm {
        for q in p..nm {
            if variant == GramVariant::GBn && map[p].client != map[q].client {
                continue;
            }
            let value = acc.get(p, q) * inv_k;
            entries.set(p, q, value);
            entries.set(q, p, value);
        }
    }
    Ok(GramMatrix {
        entries,
        sample_map: map,
        variant,
    })
}

/// Pools per-client datasets into the ordered sample list the kernels expect.
pub fn pool_samples(datasets: &[crate::datagen::ClientDataset]) -> Vec<TheorySample> {
    let mut samples = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        for r in 0..ds.num_samples() {
            samples.push(TheorySample {
                x: ds.features.row(r).to_vec(),
                y: ds.labels[r],
                client: i,
            });
        }
    }
    samples
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_theory;

    fn two_client_samples(rng: &mut Rng, per_client: usize, d: usize) -> Vec<TheorySample> {
        let mut samples = Vec::new();
        for client in 0..2 {
            for _ in 0..per_client {
                samples.push(TheorySample {
                    x: (0..d).map(|_| rng.standard_normal()).collect(),
                    y: rng.standard_normal(),
                    client,
                });
            }
        }
        samples
    }

    fn identity_list(n: usize, d: usize) -> Vec<DenseMatrix> {
        (0..n).map(|_| DenseMatrix::identity(d)).collect()
    }

    #[test]
    fn ordering_violation_is_rejected() {
        let mut rng = Rng::new(50);
        let mut samples = two_client_samples(&mut rng, 2, 3);
        samples.swap(0, 3);
        let params = init_theory(4, 3, 2, 1.0, &mut rng);
        let err = gram_finite(&params, &samples, &identity_list(2, 3), GramVariant::GAvg);
        assert!(matches!(err, Err(Error::SampleOrdering { .. })));
    }

    #[test]
    fn local_variant_is_block_restriction_of_shared_variant() {
        let mut rng = Rng::new(51);
        let samples = two_client_samples(&mut rng, 3, 4);
        let params = init_theory(16, 4, 2, 1.0, &mut rng);
        let s_list = identity_list(2, 4);
        let g_avg = gram_finite(&params, &samples, &s_list, GramVariant::GAvg).unwrap();
        let g_bn = gram_finite(&params, &samples, &s_list, GramVariant::GBn).unwrap();
        for p in 0..6 {
            for q in 0..6 {
                let same_client = g_avg.sample_map[p].client == g_avg.sample_map[q].client;
                let expected = if same_client { g_avg.entries.get(p, q) } else { 0.0 };
                assert_eq!(g_bn.entries.get(p, q), expected);
            }
        }
    }

    #[test]
    fn single_neuron_hand_computed_entries() {
        // m=1, v=(1,0), c=1, gamma=1; S_1 = I, S_2 = diag(2,1)
        // x_p = (1,0) in client 0, x_q = (1,1) in client 1
        // ||v||_{S_1} = 1, ||v||_{S_2} = sqrt(2), activations both 1
        let params = TheoryParams {
            v: DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            gamma: DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            c: vec![1.0],
            alpha: 1.0,
        };
        let s_list = vec![
            DenseMatrix::identity(2),
            DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        ];
        let samples = vec![
            TheorySample { x: vec![1.0, 0.0], y: 0.0, client: 0 },
            TheorySample { x: vec![1.0, 1.0], y: 0.0, client: 1 },
        ];
        let g = gram_finite(&params, &samples, &s_list, GramVariant::GAvg).unwrap();
        assert!((g.entries.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((g.entries.get(1, 1) - 0.5).abs() < 1e-12);
        assert!((g.entries.get(0, 1) - 1.0 / std::f64::consts::SQRT_2).abs() < 1e-12);

        // weight path: x_p projects to zero (x parallel to v under S = I);
        // x_q projects to (0, 1), giving 0.5 on the diagonal
        let v = gram_finite(&params, &samples, &s_list, GramVariant::VBn).unwrap();
        assert!(v.entries.get(0, 0).abs() < 1e-12);
        assert!(v.entries.get(0, 1).abs() < 1e-12);
        assert!((v.entries.get(1, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flipping_top_layer_signs_leaves_scale_kernel_unchanged() {
        let mut rng = Rng::new(52);
        let samples = two_client_samples(&mut rng, 2, 3);
        let mut params = init_theory(8, 3, 2, 1.0, &mut rng);
        let s_list = identity_list(2, 3);
        let g1 = gram_finite(&params, &samples, &s_list, GramVariant::GAvg).unwrap();
        for c in &mut params.c {
            *c = -*c;
        }
        let g2 = gram_finite(&params, &samples, &s_list, GramVariant::GAvg).unwrap();
        assert_eq!(g1.entries.entries, g2.entries.entries);
    }

    #[test]
    fn finite_kernels_are_positive_semidefinite() {
        let mut rng = Rng::new(53);
        for variant in [GramVariant::GAvg, GramVariant::GBn, GramVariant::VAvg, GramVariant::VBn] {
            let samples = two_client_samples(&mut rng, 3, 4);
            let params = init_theory(24, 4, 2, 1.5, &mut rng);
            let s_list = identity_list(2, 4);
            let gram = gram_finite(&params, &samples, &s_list, variant).unwrap();
            let min = crate::numerics::sym_eig_min(&gram.entries).unwrap();
            assert!(min >= -1e-10, "{variant:?} has min eigenvalue {min:.3e}");
        }
    }

    #[test]
    fn mc_variants_share_draws_exactly() {
        let mut rng = Rng::new(54);
        let samples = two_client_samples(&mut rng, 3, 4);
        let full = gram_aux_mc(&samples, 1.0, 5000, &mut Rng::new(99), GramVariant::GAvg).unwrap();
        let blocked = gram_aux_mc(&samples, 1.0, 5000, &mut Rng::new(99), GramVariant::GBn).unwrap();
        for p in 0..6 {
            for q in 0..6 {
                let same = full.sample_map[p].client == full.sample_map[q].client;
                let expected = if same { full.entries.get(p, q) } else { 0.0 };
                assert_eq!(blocked.entries.get(p, q), expected);
            }
        }
    }

    #[test]
    fn mc_with_one_client_matches_full_variant() {
        let mut rng = Rng::new(55);
        let samples: Vec<TheorySample> = (0..4)
            .map(|_| TheorySample {
                x: (0..3).map(|_| rng.standard_normal()).collect(),
                y: 0.0,
                client: 0,
            })
            .collect();
        let full = gram_aux_mc(&samples, 1.0, 2000, &mut Rng::new(7), GramVariant::GAvg).unwrap();
        let blocked = gram_aux_mc(&samples, 1.0, 2000, &mut Rng::new(7), GramVariant::GBn).unwrap();
        assert_eq!(full.entries.entries, blocked.entries.entries);
    }

    #[test]
    fn mc_rejects_weight_path_variants() {
        let samples = vec![TheorySample { x: vec![1.0], y: 0.0, client: 0 }];
        assert!(gram_aux_mc(&samples, 1.0, 10, &mut Rng::new(1), GramVariant::VAvg).is_err());
    }

    #[test]
    fn mc_standard_error_halves_when_draws_double() {
        let mut data_rng = Rng::new(56);
        let samples = two_client_samples(&mut data_rng, 1, 3);
        let estimate = |k: usize, rep: u64| {
            gram_aux_mc(&samples, 1.0, k, &mut Rng::for_stream(1000, rep), GramVariant::GAvg)
                .unwrap()
                .entries
                .get(0, 1)
        };
        let se = |k: usize| {
            let reps: Vec<f64> = (0..20).map(|r| estimate(k, r)).collect();
            let mean = reps.iter().sum::<f64>() / reps.len() as f64;
            (reps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / reps.len() as f64).sqrt()
        };
        let ratio = se(2000) / se(4000);
        let expected = std::f64::consts::SQRT_2;
        assert!(
            (ratio - expected).abs() / expected < 0.3,
            "se ratio {ratio} vs sqrt(2)"
        );
    }

    #[test]
    fn block_bounds_group_contiguous_clients() {
        let mut rng = Rng::new(57);
        let samples = two_client_samples(&mut rng, 3, 2);
        let params = init_theory(4, 2, 2, 1.0, &mut rng);
        let g = gram_finite(&params, &samples, &identity_list(2, 2), GramVariant::GAvg).unwrap();
        assert_eq!(g.block_bounds(), vec![0..3, 3..6]);
        assert_eq!(g.n_clients(), 2);
    }
}
