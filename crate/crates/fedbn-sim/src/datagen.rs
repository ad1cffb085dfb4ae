//! Synthetic feature-shift data: per-client Gaussian class pairs with
//! client-specific covariance, covariance estimation, and the scalar
//! cosine-regression toy used to illustrate why local normalization helps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, sym_eig_min, DenseMatrix, Rng};

/// One client's training data. `cov` is the feature covariance used for
/// covariance-weighted normalization: the generating covariance when known,
/// otherwise an estimate from [`estimate_cov`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub features: DenseMatrix,
    pub labels: Vec<f64>,
    pub cov: DenseMatrix,
}

impl ClientDataset {
    pub fn num_samples(&self) -> usize {
        self.features.rows
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    /// Copy with feature columns shifted to mean zero. Labels and covariance
    /// are kept as-is; the kernel-analysis path requires centered inputs while
    /// the classification path keeps the raw class means.
    pub fn centered(&self) -> ClientDataset {
        let m = self.num_samples() as f64;
        let mut means = vec![0.0; self.dim()];
        for r in 0..self.num_samples() {
            for (c, mean) in means.iter_mut().enumerate() {
                *mean += self.features.get(r, c);
            }
        }
        for mean in &mut means {
            *mean /= m;
        }
        let mut features = self.features.clone();
        for r in 0..features.rows {
            for c in 0..features.cols {
                features.set(r, c, features.get(r, c) - means[c]);
            }
        }
        ClientDataset {
            client_id: self.client_id,
            features,
            labels: self.labels.clone(),
            cov: self.cov.clone(),
        }
    }

    /// Checks the structural invariants: symmetric positive definite `cov`,
    /// no feature row a scalar multiple of another, and (optionally) feature
    /// columns with mean within 1e-8 of zero.
    pub fn validate(&self, require_centered: bool) -> Result<()> {
        if self.labels.len() != self.num_samples() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                self.num_samples(),
                self.labels.len()
            )));
        }
        if self.cov.rows != self.dim() || self.cov.cols != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{} for dimension {}",
                self.cov.rows,
                self.cov.cols,
                self.dim()
            )));
        }
        if self.cov.max_rel_asymmetry() > 1e-10 {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let min_eig = sym_eig_min(&self.cov)?;
        if min_eig <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance has minimal eigenvalue {min_eig:.3e}"
            )));
        }
        if let Some((p, q)) = find_parallel_rows(&self.features) {
            return Err(Error::InvalidArgument(format!(
                "feature rows {p} and {q} are parallel"
            )));
        }
        if require_centered {
            let m = self.num_samples() as f64;
            for c in 0..self.dim() {
                let mean: f64 =
                    (0..self.num_samples()).map(|r| self.features.get(r, c)).sum::<f64>() / m;
                if mean.abs() > 1e-8 {
                    return Err(Error::InvalidArgument(format!(
                        "column {c} has mean {mean:.3e} after centering"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes features+labels as CSV (`f0,...,f{d-1},label`) plus a JSON
    /// sidecar holding the client id and covariance.
    pub fn write_files(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = String::new();
        for c in 0..self.dim() {
            out.push_str(&format!("f{c},"));
        }
        out.push_str("label\n");
        for r in 0..self.num_samples() {
            for c in 0..self.dim() {
                out.push_str(&crate::numerics::fmt_f64(self.features.get(r, c)));
                out.push(',');
            }
            out.push_str(&crate::numerics::fmt_f64(self.labels[r]));
            out.push('\n');
        }
        std::fs::write(csv_path, out)?;
        let sidecar = Sidecar {
            client_id: self.client_id,
            cov: self.cov.clone(),
        };
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read_files(csv_path: &Path, sidecar_path: &Path) -> Result<ClientDataset> {
        let text = std::fs::read_to_string(csv_path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            path: csv_path.display().to_string(),
            message: "empty file".into(),
        })?;
        let dim = header.split(',').count() - 1;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let fields = fields.map_err(|e| Error::Parse {
                path: csv_path.display().to_string(),
                message: format!("line {}: {e}", lineno + 2),
            })?;
            if fields.len() != dim + 1 {
                return Err(Error::Parse {
                    path: csv_path.display().to_string(),
                    message: format!("line {}: expected {} fields", lineno + 2, dim + 1),
                });
            }
            labels.push(fields[dim]);
            rows.push(fields[..dim].to_vec());
        }
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        Ok(ClientDataset {
            client_id: sidecar.client_id,
            features: DenseMatrix::from_rows(&rows)?,
            labels,
            cov: sidecar.cov,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    client_id: usize,
    cov: DenseMatrix,
}

/// Scalar regression dataset for the loss-surface illustration. Targets
/// follow `y = cos(w_true * x / local_std) + eps`: every client observes the
/// same underlying signal at its own feature scale, so normalizing by the
/// local standard deviation aligns the clients' optima.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Empirical standard deviation of `xs` (population convention).
    pub local_std: f64,
}

/// Covariance with unit diagonal and constant off-diagonal `rho`.
/// Diagonal dominance (|rho| < 1/(d-1)) keeps it positive definite.
pub fn make_offdiag_cov(d: usize, rho: f64) -> Result<DenseMatrix> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "off-diagonal covariance needs d >= 2, got {d}"
        )));
    }
    let limit = 1.0 / (d as f64 - 1.0);
    if rho.abs() >= limit {
        return Err(Error::InvalidArgument(format!(
            "|rho| = {} is outside the positive-definite range (< {limit:.4})",
            rho.abs()
        )));
    }
    Ok(DenseMatrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { rho }))
}

/// Binary classification client: M/2 draws from N(-1, cov) labeled 0 and M/2
/// from N(+1, cov) labeled 1 (mean vectors all-(-1) and all-(+1)), rows
/// shuffled by `rng`. The `cov` field records the generating covariance.
pub fn make_gaussian_pair_client(
    id: usize,
    cov: &DenseMatrix,
    m: usize,
    rng: &mut Rng,
) -> Result<ClientDataset> {
    if m == 0 || m % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sample count must be even and positive, got {m}"
        )));
    }
    let d = cov.rows;
    let neg = vec![-1.0; d];
    let pos = vec![1.0; d];
    let mut rows = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m / 2 {
        rows.push(gaussian_sample(&neg, cov, rng)?);
        labels.push(0.0);
    }
    for _ in 0..m / 2 {
        rows.push(gaussian_sample(&pos, cov, rng)?);
        labels.push(1.0);
    }
    let mut order: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut order);
    let shuffled_rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
    let shuffled_labels: Vec<f64> = order.iter().map(|&i| labels[i]).collect();
    Ok(ClientDataset {
        client_id: id,
        features: DenseMatrix::from_rows(&shuffled_rows)?,
        labels: shuffled_labels,
        cov: cov.clone(),
    })
}

/// Empirical second moment (1/M) XᵀX of centered rows, symmetrized.
/// Rejects inputs with fewer than d+1 rows or a numerically singular result.
pub fn estimate_cov(features: &DenseMatrix) -> Result<DenseMatrix> {
    let (m, d) = (features.rows, features.cols);
    if m < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "covariance estimation needs at least {} rows, got {m}",
            d + 1
        )));
    }
    let mut cov = DenseMatrix::zeros(d, d);
    for r in 0..m {
        let row = features.row(r);
        for i in 0..d {
            for j in 0..d {
                cov.set(i, j, cov.get(i, j) + row[i] * row[j]);
            }
        }
    }
    let cov = cov.scale(1.0 / m as f64).symmetrized();
    let min_eig = sym_eig_min(&cov)?;
    if min_eig <= 1e-12 {
        return Err(Error::RankDeficient(format!(
            "estimated covariance has minimal eigenvalue {min_eig:.3e}"
        )));
    }
    Ok(cov)
}

/// Cosine-regression toy client: `xs ~ N(0, x_std^2)`,
/// `ys = cos(w_true * xs / local_std) + noise_std * eps`.
pub fn make_cos_dataset(
    w_true: f64,
    x_std: f64,
    noise_std: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<ToyDataset> {
    if x_std <= 0.0 {
        return Err(Error::InvalidArgument(format!("x_std must be positive, got {x_std}")));
    }
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_std must be non-negative, got {noise_std}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let xs: Vec<f64> = (0..n).map(|_| x_std * rng.standard_normal()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let local_std = var.sqrt();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| (w_true * x / local_std).cos() + noise_std * rng.standard_normal())
        .collect();
    Ok(ToyDataset { xs, ys, local_std })
}

/// First pair of rows that are nonzero scalar multiples of each other, if any.
pub fn find_parallel_rows(features: &DenseMatrix) -> Option<(usize, usize)> {
    let norms: Vec<f64> = (0..features.rows)
        .map(|r| crate::numerics::euclidean_norm(features.row(r)))
        .collect();
    for p in 0..features.rows {
        if norms[p] == 0.0 {
            continue;
        }
        for q in (p + 1)..features.rows {
            if norms[q] == 0.0 {
                continue;
            }
            let cos = crate::numerics::dot(features.row(p), features.row(q)) / (norms[p] * norms[q]);
            if (cos.abs() - 1.0).abs() < 1e-12 {
                return Some((p, q));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offdiag_with_zero_rho_is_identity() {
        let cov = make_offdiag_cov(10, 0.0).unwrap();
        assert_eq!(cov.entries, DenseMatrix::identity(10).entries);
    }

    #[test]
    fn offdiag_two_by_two_eigenvalues() {
        // eigenvalues are 1 - rho and 1 + rho
        let cov = make_offdiag_cov(2, 0.5).unwrap();
        let eigs = crate::numerics::sym_eigenvalues(&cov).unwrap();
        assert!((eigs[0] - 0.5).abs() < 1e-12);
        assert!((eigs[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn offdiag_rejects_rho_outside_pd_range() {
        assert!(make_offdiag_cov(3, 0.6).is_err());
        assert!(make_offdiag_cov(3, -0.5).is_err());
        assert!(make_offdiag_cov(1, 0.0).is_err());
    }

    #[test]
    fn offdiag_is_positive_definite_inside_range() {
        for d in [2, 5, 10] {
            for sign in [-1.0, 1.0] {
                let rho = sign * 0.9 / (d as f64 - 1.0);
                let cov = make_offdiag_cov(d, rho).unwrap();
                assert!(sym_eig_min(&cov).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn pair_client_class_means_land_near_targets() {
        // 100 draws per class with unit covariance: CLT keeps every
        // coordinate of the class-0 mean within 0.5 of -1
        let cov = DenseMatrix::identity(10);
        let mut rng = Rng::new(2024);
        let ds = make_gaussian_pair_client(0, &cov, 200, &mut rng).unwrap();
        let mut class0_mean = vec![0.0; 10];
        let mut count = 0.0;
        for r in 0..ds.num_samples() {
            if ds.labels[r] == 0.0 {
                count += 1.0;
                for c in 0..10 {
                    class0_mean[c] += ds.features.get(r, c);
                }
            }
        }
        assert_eq!(count as usize, 100);
        for mean in class0_mean.iter().map(|s| s / count) {
            assert!((mean - (-1.0)).abs() < 0.5, "class-0 mean {mean}");
        }
    }

    #[test]
    fn pair_client_minimal_size_has_one_sample_per_class() {
        let cov = DenseMatrix::identity(3);
        let ds = make_gaussian_pair_client(0, &cov, 2, &mut Rng::new(1)).unwrap();
        let ones = ds.labels.iter().filter(|&&l| l == 1.0).count();
        assert_eq!(ds.num_samples(), 2);
        assert_eq!(ones, 1);
    }

    #[test]
    fn pair_client_rejects_odd_size() {
        let cov = DenseMatrix::identity(3);
        assert!(make_gaussian_pair_client(0, &cov, 3, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn pair_client_is_deterministic_per_seed() {
        let cov = make_offdiag_cov(4, 0.1).unwrap();
        let a = make_gaussian_pair_client(1, &cov, 20, &mut Rng::for_client(9, 1)).unwrap();
        let b = make_gaussian_pair_client(1, &cov, 20, &mut Rng::for_client(9, 1)).unwrap();
        assert_eq!(a.features.entries, b.features.entries);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn centered_dataset_passes_validation() {
        let cov = make_offdiag_cov(5, 0.1).unwrap();
        let ds = make_gaussian_pair_client(0, &cov, 40, &mut Rng::new(3)).unwrap();
        ds.centered().validate(true).unwrap();
    }

    #[test]
    fn estimate_cov_on_cross_pattern() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let features = DenseMatrix::from_rows(&rows).unwrap();
        let cov = estimate_cov(&features).unwrap();
        assert_eq!(cov.entries, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn estimate_cov_converges_to_generator() {
        let target = make_offdiag_cov(3, 0.2).unwrap();
        let mut rng = Rng::new(55);
        let n = 100_000;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push(gaussian_sample(&[0.0; 3], &target, &mut rng).unwrap());
        }
        let est = estimate_cov(&DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        let rel = est.add(&target.scale(-1.0)).unwrap().frobenius_norm() / target.frobenius_norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn estimate_cov_rejects_degenerate_input() {
        let rows = vec![vec![1.0, 2.0]; 5];
        let features = DenseMatrix::from_rows(&rows).unwrap();
        assert!(estimate_cov(&features).is_err());
    }

    #[test]
    fn cos_dataset_constant_target_when_w_true_zero() {
        let ds = make_cos_dataset(0.0, 1.0, 0.0, 50, &mut Rng::new(4)).unwrap();
        assert!(ds.ys.iter().all(|&y| y == 1.0));
    }

    #[test]
    fn cos_dataset_local_std_tracks_x_std() {
        let a = make_cos_dataset(2.0, 1.0, 0.05, 1000, &mut Rng::for_client(8, 0)).unwrap();
        let b = make_cos_dataset(2.0, 3.0, 0.05, 1000, &mut Rng::for_client(8, 1)).unwrap();
        let ratio = b.local_std / a.local_std;
        assert!((ratio - 3.0).abs() / 3.0 < 0.1, "ratio {ratio}");
    }

    #[test]
    fn cos_dataset_is_deterministic() {
        let a = make_cos_dataset(2.0, 1.5, 0.1, 64, &mut Rng::new(12)).unwrap();
        let b = make_cos_dataset(2.0, 1.5, 0.1, 64, &mut Rng::new(12)).unwrap();
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.ys, b.ys);
    }

    #[test]
    fn cos_dataset_rejects_bad_arguments() {
        assert!(make_cos_dataset(1.0, 0.0, 0.1, 10, &mut Rng::new(1)).is_err());
        assert!(make_cos_dataset(1.0, 1.0, -0.1, 10, &mut Rng::new(1)).is_err());
        assert!(make_cos_dataset(1.0, 1.0, 0.1, 1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn covariance_designs_differ_by_expected_frobenius_distance() {
        let d = 10;
        let rho = 0.08;
        let identity = DenseMatrix::identity(d);
        let offdiag = make_offdiag_cov(d, rho).unwrap();
        let dist = offdiag.add(&identity.scale(-1.0)).unwrap().frobenius_norm();
        let expected = rho * ((d * (d - 1)) as f64).sqrt();
        assert!((dist - expected).abs() < 1e-12);
    }

    #[test]
    fn parallel_row_detection() {
        let features =
            DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0], vec![-2.0, -4.0]]).unwrap();
        assert_eq!(find_parallel_rows(&features), Some((0, 2)));
    }

    #[test]
    fn dataset_files_round_trip() {
        let cov = make_offdiag_cov(3, 0.1).unwrap();
        let ds = make_gaussian_pair_client(2, &cov, 10, &mut Rng::new(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("client.csv");
        let json = dir.path().join("client.json");
        ds.write_files(&csv, &json).unwrap();
        let back = ClientDataset::read_files(&csv, &json).unwrap();
        assert_eq!(back.client_id, 2);
        assert_eq!(back.features.entries, ds.features.entries);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.cov.entries, ds.cov.entries);
    }
}
