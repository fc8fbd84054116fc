//! Sparse outlier extraction.
//!
//! Weights further than `k·σ` from the matrix mean are pulled out into a
//! sparse binary16 residual and replaced by the mean in the bulk, so the
//! codebook only has to cover the well-behaved part of the distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp16::Half;
use crate::tensor::{channel_stats, shape_mismatch, WeightMatrix};

/// On-disk size of one outlier triple: i64 row, i64 col, binary16 value.
pub const BYTES_PER_OUTLIER: usize = 18;

pub const DEFAULT_K: f64 = 4.0;
pub const DEFAULT_CAP_FRACTION: f64 = 0.02;

/// How stored outlier values combine with the codebook decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualConvention {
    /// Values are `w - decode(bulk)` and are added onto the decode.
    #[default]
    Add,
    /// Values are the raw weights and replace the decode.
    Overwrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutlierEntry {
    pub row: usize,
    pub col: usize,
    pub value: Half,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSet {
    /// Sorted by `(row, col)`, positions unique.
    pub entries: Vec<OutlierEntry>,
    pub k: f64,
    pub cap_fraction: f64,
    pub mu_used: f64,
    pub sigma_used: f64,
}

impl OutlierSet {
    pub fn empty(k: f64, cap_fraction: f64) -> Self {
        Self {
            entries: Vec::new(),
            k,
            cap_fraction,
            mu_used: 0.0,
            sigma_used: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|e| (e.row, e.col))
    }
}

/// The source matrix with every outlier position replaced by the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BulkMatrix(WeightMatrix);

impl BulkMatrix {
    /// Treat a matrix as an already-cleaned bulk.
    pub fn from_matrix(w: WeightMatrix) -> Self {
        Self(w)
    }

    pub fn matrix(&self) -> &WeightMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> WeightMatrix {
        self.0
    }
}

impl std::ops::Deref for BulkMatrix {
    type Target = WeightMatrix;

    fn deref(&self) -> &WeightMatrix {
        &self.0
    }
}

/// Maximum number of outliers allowed for `numel` weights.
pub fn cap_count(cap_fraction: f64, numel: usize) -> usize {
    // the epsilon keeps e.g. 0.02 * 5000 from flooring to 99
    ((cap_fraction * numel as f64) + 1e-9).floor() as usize
}

pub fn extract_outliers(w: &WeightMatrix, k: f64, cap_fraction: f64) -> (BulkMatrix, OutlierSet) {
    let (mu, sigma) = channel_stats(w);
    let mut set = OutlierSet {
        entries: Vec::new(),
        k,
        cap_fraction,
        mu_used: mu,
        sigma_used: sigma,
    };
    if sigma == 0.0 {
        return (BulkMatrix(w.clone()), set);
    }
    let threshold = k * sigma;
    let mut candidates: Vec<(f64, usize)> = w
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| {
            let dev = (v as f64 - mu).abs();
            (dev > threshold).then_some((dev, i))
        })
        .collect();

    let cap = cap_count(cap_fraction, w.numel());
    if candidates.len() > cap {
        // largest deviation first; equal deviations resolve in row-major order
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.truncate(cap);
    }
    candidates.sort_by_key(|&(_, i)| i);

    let cols = w.cols();
    let mut bulk = w.data().to_vec();
    let mu32 = mu as f32;
    set.entries = candidates
        .into_iter()
        .map(|(_, i)| {
            let raw = bulk[i];
            bulk[i] = mu32;
            OutlierEntry {
                row: i / cols,
                col: i % cols,
                value: Half::from_f32_saturating(raw),
            }
        })
        .collect();
    let bulk = WeightMatrix::new(w.rows(), w.cols(), bulk).expect("bulk keeps source shape");
    (BulkMatrix(bulk), set)
}

/// Rewrite every outlier value as the residual between the original weight
/// and the codebook-only reconstruction at that position.
pub fn finalize_residuals(outliers: &OutlierSet, w: &WeightMatrix, bulk_recon: &WeightMatrix) -> Result<OutlierSet> {
    if w.shape() != bulk_recon.shape() {
        return Err(shape_mismatch(w, bulk_recon));
    }
    let mut out = outliers.clone();
    for e in &mut out.entries {
        check_bounds(e, w.rows(), w.cols())?;
        let residual = w.get(e.row, e.col) - bulk_recon.get(e.row, e.col);
        e.value = Half::try_from_f32(residual)?;
    }
    Ok(out)
}

/// Store the raw weights instead of residuals (scatter-overwrite convention).
pub fn raw_values(outliers: &OutlierSet, w: &WeightMatrix) -> Result<OutlierSet> {
    let mut out = outliers.clone();
    for e in &mut out.entries {
        check_bounds(e, w.rows(), w.cols())?;
        e.value = Half::try_from_f32(w.get(e.row, e.col))?;
    }
    Ok(out)
}

/// Scatter the outlier values into a row-major reconstruction buffer.
pub fn apply_outliers(
    data: &mut [f32],
    rows: usize,
    cols: usize,
    outliers: &OutlierSet,
    convention: ResidualConvention,
) -> Result<()> {
    for e in &outliers.entries {
        check_bounds(e, rows, cols)?;
        let slot = &mut data[e.row * cols + e.col];
        match convention {
            ResidualConvention::Add => *slot += e.value.to_f32(),
            ResidualConvention::Overwrite => *slot = e.value.to_f32(),
        }
    }
    Ok(())
}

pub fn outlier_bytes(outliers: &OutlierSet) -> usize {
    BYTES_PER_OUTLIER * outliers.len()
}

fn check_bounds(e: &OutlierEntry, rows: usize, cols: usize) -> Result<()> {
    if e.row >= rows || e.col >= cols {
        return Err(Error::OutlierOutOfBounds {
            row: e.row,
            col: e.col,
            rows,
            cols,
        });
    }
    Ok(())
}
