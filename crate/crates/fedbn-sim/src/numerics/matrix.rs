//! Dense row-major matrix storage and small linear-algebra helpers.
//!
//! Everything here is plain sequential `f64` arithmetic. Reductions run in a
//! fixed index order so repeated runs are bitwise identical regardless of the
//! caller's thread layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix with row-major entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row vectors, rejecting ragged or non-finite input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut entries = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            entries.extend_from_slice(row);
        }
        let m = Self {
            rows: rows.len(),
            cols,
            entries,
        };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !e.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite entry {e} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.entries[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.entries[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * v[c];
            }
            out[r] = acc;
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.entries[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| e * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "add: {}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// (A + Aᵀ) / 2
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| {
            0.5 * (self.get(r, c) + self.get(c, r))
        })
    }

    /// Largest |A_rc - A_cr| relative to the largest |entry|, zero for empty.
    pub fn max_rel_asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst / scale
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |m, e| m.max(e.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Principal submatrix on the given (sorted, in-range) index set.
    pub fn principal_submatrix(&self, indices: &[usize]) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::InvalidArgument("principal submatrix of non-square matrix".into()));
        }
        for &i in indices {
            if i >= self.rows {
                return Err(Error::DimensionMismatch(format!(
                    "index {i} out of range for {}x{} matrix",
                    self.rows, self.cols
                )));
            }
        }
        Ok(Self::from_fn(indices.len(), indices.len(), |r, c| {
            self.get(indices[r], indices[c])
        }))
    }

    /// CSV rendering, one row per line, 17 significant digits per entry.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row = self.row(r);
            for (c, e) in row.iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                out.push_str(&fmt_f64(*e));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::Parse {
                path: "<csv>".into(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

/// Fixed-width float formatting used by every CSV writer (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::InvalidArgument("cholesky of non-square matrix".into()));
    }
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite(format!(
                        "cholesky pivot {sum:.3e} at row {i}"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_rows_rejects_ragged() {
        let err = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]);
        assert!(err.is_err());
    }

    #[test]
    fn from_rows_rejects_nan() {
        let err = DenseMatrix::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(err.is_err());
    }

    #[test]
    fn matvec_matches_hand_computation() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = DenseMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        for (x, y) in a.entries.iter().zip(&back.entries) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_bits() {
        let m = DenseMatrix::from_rows(&[
            vec![1.0 / 3.0, -2.5e-13],
            vec![std::f64::consts::PI, 1e17],
        ])
        .unwrap();
        let back = DenseMatrix::from_csv_str(&m.to_csv_string()).unwrap();
        assert_eq!(m.entries, back.entries);
    }

    #[test]
    fn principal_submatrix_picks_rows_and_cols() {
        let m = DenseMatrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let s = m.principal_submatrix(&[1, 3]).unwrap();
        assert_eq!(s.entries, vec![5.0, 7.0, 13.0, 15.0]);
    }
}
