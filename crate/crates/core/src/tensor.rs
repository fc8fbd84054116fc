//! Dense weight matrices and reconstruction-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D projection matrix, rows = output channels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!(
                "dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite value at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Stack matrices with equal column counts along the channel axis.
    pub fn concat_rows(parts: &[&WeightMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidMatrix("nothing to concatenate".into()))?;
        for p in parts {
            if p.cols != first.cols {
                return Err(shape_mismatch(first, p));
            }
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * first.cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            rows,
            cols: first.cols,
            data,
        })
    }

    /// Row-block `[start, start + count)` as its own matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.rows {
            return Err(Error::InvalidMatrix(format!(
                "row block {start}+{count} outside {} rows",
                self.rows
            )));
        }
        Ok(Self {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        })
    }
}

pub(crate) fn shape_mismatch(a: &WeightMatrix, b: &WeightMatrix) -> Error {
    Error::ShapeMismatch {
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

fn check_same_shape(a: &WeightMatrix, b: &WeightMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch(a, b));
    }
    Ok(())
}

/// Mean and population standard deviation over every element of the matrix.
pub fn channel_stats(w: &WeightMatrix) -> (f64, f64) {
    let n = w.numel() as f64;
    let mean = w.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = w
        .data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Cosine between two rows. Two zero rows count as a perfect match, one zero
/// row against a non-zero row as orthogonal.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

pub fn per_channel_cosine(w: &WeightMatrix, w_hat: &WeightMatrix) -> Result<Vec<f64>> {
    check_same_shape(w, w_hat)?;
    Ok(w.rows_iter()
        .zip(w_hat.rows_iter())
        .map(|(a, b)| cosine(a, b))
        .collect())
}

pub fn mse(w: &WeightMatrix, w_hat: &WeightMatrix) -> Result<f64> {
    check_same_shape(w, w_hat)?;
    let sum: f64 = w
        .data
        .iter()
        .zip(&w_hat.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / w.numel() as f64)
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

/// Linear-interpolated percentile (`q` in [0, 1]) used for population tables.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Reconstruction quality of one layer, comparing the codebook-only decode
/// (`bulk`) and the decode with outlier residuals applied (`full`) against the
/// original weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Per-channel cosine of the full reconstruction.
    pub per_channel_cos: Vec<f64>,
    pub median_cos: f64,
    /// Median per-channel cosine of the codebook-only reconstruction.
    pub median_cos_bulk: f64,
    pub mse_bulk: f64,
    pub mse_full: f64,
    /// `mse_bulk / mse_full`; infinite when the full reconstruction is exact
    /// and the bulk one is not, 1 when both are exact.
    pub mse_ratio: f64,
}

impl QualityReport {
    pub fn new(original: &WeightMatrix, bulk: &WeightMatrix, full: &WeightMatrix) -> Result<Self> {
        let per_channel_cos = per_channel_cosine(original, full)?;
        let bulk_cos = per_channel_cosine(original, bulk)?;
        let mse_bulk = mse(original, bulk)?;
        let mse_full = mse(original, full)?;
        let mse_ratio = if mse_full > 0.0 {
            mse_bulk / mse_full
        } else if mse_bulk > 0.0 {
            f64::INFINITY
        } else {
            1.0
        };
        Ok(Self {
            median_cos: median(&per_channel_cos),
            median_cos_bulk: median(&bulk_cos),
            per_channel_cos,
            mse_bulk,
            mse_full,
            mse_ratio,
        })
    }

    pub fn delta_cos(&self) -> f64 {
        self.median_cos - self.median_cos_bulk
    }
}
