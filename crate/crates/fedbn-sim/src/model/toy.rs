//! Scalar cosine model with a single normalization scale, used for the
//! loss-surface illustration.

use serde::{Deserialize, Serialize};

use crate::datagen::ToyDataset;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Scalar model: prediction cos(w * x / gamma). `gamma` plays the role of the
/// local normalization constant (the client's empirical standard deviation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyModel {
    pub w: f64,
    pub gamma: f64,
}

impl ToyModel {
    pub fn new(w: f64, gamma: f64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "toy normalization scale must be positive, got {gamma}"
            )));
        }
        Ok(Self { w, gamma })
    }

    pub fn predict(&self, x: f64) -> f64 {
        (self.w * x / self.gamma).cos()
    }

    pub fn mse(&self, data: &ToyDataset) -> f64 {
        data.xs
            .iter()
            .zip(&data.ys)
            .map(|(&x, &y)| {
                let diff = self.predict(x) - y;
                diff * diff
            })
            .sum::<f64>()
            / data.xs.len() as f64
    }
}

/// Mean-squared-error surface over a (w, gamma) grid; entry (a, b) evaluates
/// w_grid[a] with gamma_grid[b].
pub fn toy_mse_surface(
    data: &ToyDataset,
    w_grid: &[f64],
    gamma_grid: &[f64],
) -> Result<DenseMatrix> {
    if w_grid.is_empty() || gamma_grid.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    if let Some(bad) = gamma_grid.iter().find(|&&g| g <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma grid must be positive, found {bad}"
        )));
    }
    let n = data.xs.len() as f64;
    let mut surface = DenseMatrix::zeros(w_grid.len(), gamma_grid.len());
    for (a, &w) in w_grid.iter().enumerate() {
        for (b, &gamma) in gamma_grid.iter().enumerate() {
            let mut acc = 0.0;
            for (&x, &y) in data.xs.iter().zip(&data.ys) {
                let diff = (w * x / gamma).cos() - y;
                acc += diff * diff;
            }
            surface.set(a, b, acc / n);
        }
    }
    Ok(surface)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_cos_dataset;
    use crate::numerics::Rng;

    #[test]
    fn matched_cell_attains_the_noise_floor() {
        // noise-free data with w_true and the local std on the grid:
        // the (w_true, local_std) cell fits exactly
        let data = make_cos_dataset(2.0, 1.5, 0.0, 200, &mut Rng::new(40)).unwrap();
        let w_grid = vec![0.5, 1.0, 2.0, 3.0];
        let gamma_grid = vec![0.5, data.local_std, 3.0];
        let surface = toy_mse_surface(&data, &w_grid, &gamma_grid).unwrap();
        assert!(surface.get(2, 1) < 1e-24, "matched cell {}", surface.get(2, 1));
        // and it is the grid minimum
        let min = surface.entries.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, surface.get(2, 1));
    }

    #[test]
    fn constant_target_is_minimized_on_the_zero_w_line() {
        let data = make_cos_dataset(0.0, 1.0, 0.0, 100, &mut Rng::new(41)).unwrap();
        let w_grid = vec![0.0, 1.0, 2.0];
        let gamma_grid = vec![0.5, 1.0, 2.0];
        let surface = toy_mse_surface(&data, &w_grid, &gamma_grid).unwrap();
        for b in 0..3 {
            assert_eq!(surface.get(0, b), 0.0);
            for a in 1..3 {
                assert!(surface.get(a, b) > 0.0);
            }
        }
    }

    #[test]
    fn one_by_one_grid() {
        let data = make_cos_dataset(1.0, 1.0, 0.1, 50, &mut Rng::new(42)).unwrap();
        let surface = toy_mse_surface(&data, &[1.0], &[1.0]).unwrap();
        assert_eq!(surface.rows, 1);
        assert_eq!(surface.cols, 1);
    }

    #[test]
    fn rejects_non_positive_gamma() {
        let data = make_cos_dataset(1.0, 1.0, 0.1, 50, &mut Rng::new(43)).unwrap();
        assert!(toy_mse_surface(&data, &[1.0], &[0.0]).is_err());
        assert!(ToyModel::new(1.0, 0.0).is_err());
    }
}
