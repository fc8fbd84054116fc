//! Per-channel scalar codebooks learned with Lloyd iteration (V2 mode).
//!
//! Each output channel gets `2^N` binary16 entries. Fitting is deterministic:
//! the initial entries are CDF-uniform quantiles of the channel and there is
//! no random re-seeding of empty cells.

use crate::error::{Error, Result};
use crate::fp16::Half;
use crate::par::map_indexed;
use crate::tensor::WeightMatrix;

pub const DEFAULT_LLOYD_ITERS: usize = 20;
pub const DEFAULT_MOE_LLOYD_ITERS: usize = 20;

/// One channel's codebook; entries sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelCodebook {
    entries: Vec<Half>,
}

impl ChannelCodebook {
    pub fn new(entries: Vec<Half>) -> Result<Self> {
        if entries.len() < 2 || !entries.len().is_power_of_two() {
            return Err(Error::InvalidLayer(format!(
                "codebook length {} is not a power of two >= 2",
                entries.len()
            )));
        }
        if entries.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidLayer("codebook entry is not finite".into()));
        }
        if entries.windows(2).any(|w| w[0].to_f32() > w[1].to_f32()) {
            return Err(Error::InvalidLayer("codebook entries not sorted".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Half] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f32> {
        self.entries.iter().map(|h| h.to_f32()).collect()
    }

    pub fn value(&self, idx: usize) -> f32 {
        self.entries[idx].to_f32()
    }

    fn from_centroids(centroids: &[f64]) -> Self {
        let mut entries: Vec<Half> = centroids.iter().map(|&c| Half::from_f32_saturating(c as f32)).collect();
        entries.sort_by(|a, b| a.to_f32().total_cmp(&b.to_f32()));
        Self { entries }
    }
}

/// V2 payload: one codebook per output channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelCodebookSet {
    n_bits: u8,
    codebooks: Vec<ChannelCodebook>,
}

impl ChannelCodebookSet {
    pub fn new(n_bits: u8, codebooks: Vec<ChannelCodebook>) -> Result<Self> {
        let size = 1usize << n_bits;
        if let Some(cb) = codebooks.iter().find(|cb| cb.len() != size) {
            return Err(Error::InvalidLayer(format!(
                "codebook of length {} in a set with N={n_bits}",
                cb.len()
            )));
        }
        Ok(Self { n_bits, codebooks })
    }

    pub fn n_bits(&self) -> u8 {
        self.n_bits
    }

    pub fn codebooks(&self) -> &[ChannelCodebook] {
        &self.codebooks
    }

    pub fn len(&self) -> usize {
        self.codebooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codebooks.is_empty()
    }
}

/// Dense matrix of codebook indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    rows: usize,
    cols: usize,
    indices: Vec<u8>,
}

impl IndexMatrix {
    pub fn new(rows: usize, cols: usize, indices: Vec<u8>) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} index matrix needs {} entries, got {}",
                rows * cols,
                indices.len()
            )));
        }
        Ok(Self { rows, cols, indices })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.indices[r * self.cols + c]
    }
}

/// Empirical quantile with linear interpolation between order statistics,
/// position `n·p - 0.5` (zero-based) clamped to the sample range.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (n as f64 * p - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn quantile_centroids(sorted: &[f64], size: usize) -> Vec<f64> {
    (0..size)
        .map(|j| quantile_sorted(sorted, (j as f64 + 0.5) / size as f64))
        .collect()
}

fn sorted_f64(values: &[f32]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    sorted
}

pub fn init_codebook(channel_values: &[f32], size: usize) -> ChannelCodebook {
    assert!(!channel_values.is_empty(), "empty channel");
    assert!(size >= 2, "codebook size must be at least 2");
    ChannelCodebook::from_centroids(&quantile_centroids(&sorted_f64(channel_values), size))
}

/// Unrounded outcome of a Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydTrace {
    /// Final centroids, ascending, before binary16 rounding.
    pub centroids: Vec<f64>,
    /// Within-cluster SSE of the initial centroids followed by the SSE after
    /// each completed round.
    pub sse_history: Vec<f64>,
}

/// Cluster boundaries for sorted centroids over sorted values: cluster `j`
/// is `values[bounds[j]..bounds[j + 1]]`. Values on a midpoint go to the
/// lower cluster.
fn cluster_bounds(sorted: &[f64], centroids: &[f64], bounds: &mut Vec<usize>) {
    bounds.clear();
    bounds.push(0);
    for w in centroids.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let start = *bounds.last().unwrap();
        let b = start + sorted[start..].partition_point(|&x| x <= mid);
        bounds.push(b);
    }
    bounds.push(sorted.len());
}

struct PrefixSums {
    sum: Vec<f64>,
}

impl PrefixSums {
    fn new(sorted: &[f64]) -> Self {
        let mut sum = Vec::with_capacity(sorted.len() + 1);
        let mut s = 0.0;
        sum.push(0.0);
        for &x in sorted {
            s += x;
            sum.push(s);
        }
        Self { sum }
    }

    fn range(&self, a: usize, b: usize) -> f64 {
        self.sum[b] - self.sum[a]
    }
}

fn sse_for(sorted: &[f64], centroids: &[f64], bounds: &[usize]) -> f64 {
    centroids
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            sorted[bounds[j]..bounds[j + 1]]
                .iter()
                .map(|&x| (x - c) * (x - c))
                .sum::<f64>()
        })
        .sum()
}

/// Lloyd iteration on one channel, recording the SSE trajectory.
pub fn lloyd_trace(channel_values: &[f32], size: usize, iters: usize) -> LloydTrace {
    assert!(!channel_values.is_empty(), "empty channel");
    assert!(size >= 2, "codebook size must be at least 2");
    let sorted = sorted_f64(channel_values);
    let prefix = PrefixSums::new(&sorted);
    let mut centroids = quantile_centroids(&sorted, size);
    let mut bounds = Vec::with_capacity(size + 1);
    let mut history = Vec::with_capacity(iters + 1);

    cluster_bounds(&sorted, &centroids, &mut bounds);
    history.push(sse_for(&sorted, &centroids, &bounds));
    for _ in 0..iters {
        let mut next = centroids.clone();
        for (j, c) in next.iter_mut().enumerate() {
            let (a, b) = (bounds[j], bounds[j + 1]);
            if b > a {
                let s = prefix.range(a, b);
                // the mean of a sorted run must stay inside it
                *c = (s / (b - a) as f64).clamp(sorted[a], sorted[b - 1]);
            }
        }
        next.sort_by(f64::total_cmp);
        let converged = next == centroids;
        centroids = next;
        cluster_bounds(&sorted, &centroids, &mut bounds);
        history.push(sse_for(&sorted, &centroids, &bounds));
        if converged {
            break;
        }
    }
    LloydTrace {
        centroids,
        sse_history: history,
    }
}

pub fn lloyd_fit(channel_values: &[f32], size: usize, iters: usize) -> ChannelCodebook {
    ChannelCodebook::from_centroids(&lloyd_trace(channel_values, size, iters).centroids)
}

/// Fit one codebook per row of `bulk`.
pub fn fit_channel_codebooks(bulk: &WeightMatrix, n_bits: u8, iters: usize) -> ChannelCodebookSet {
    let size = 1usize << n_bits;
    let codebooks = map_indexed(bulk.rows(), |r| lloyd_fit(bulk.row(r), size, iters));
    ChannelCodebookSet { n_bits, codebooks }
}

/// Index of the entry nearest to `x` in an ascending slice; exact ties go to
/// the lower index.
pub fn nearest_index(sorted_entries: &[f64], x: f64) -> usize {
    let mids = sorted_entries.len() - 1;
    // count midpoints strictly below x
    let (mut lo, mut hi) = (0usize, mids);
    while lo < hi {
        let m = (lo + hi) / 2;
        let mid = 0.5 * (sorted_entries[m] + sorted_entries[m + 1]);
        if mid < x {
            lo = m + 1;
        } else {
            hi = m;
        }
    }
    let mut idx = lo;
    while idx > 0 && sorted_entries[idx - 1] == sorted_entries[idx] {
        idx -= 1;
    }
    idx
}

pub fn assign_indices(bulk: &WeightMatrix, cbs: &ChannelCodebookSet) -> Result<IndexMatrix> {
    if cbs.len() != bulk.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} codebooks for {} channels",
            cbs.len(),
            bulk.rows()
        )));
    }
    let rows = map_indexed(bulk.rows(), |r| {
        let entries: Vec<f64> = cbs.codebooks[r].values().iter().map(|&v| v as f64).collect();
        bulk.row(r)
            .iter()
            .map(|&x| nearest_index(&entries, x as f64) as u8)
            .collect::<Vec<u8>>()
    });
    IndexMatrix::new(bulk.rows(), bulk.cols(), rows.concat())
}

/// Codebook-only reconstruction of a V2 layer.
pub fn reconstruct(indices: &IndexMatrix, cbs: &ChannelCodebookSet) -> Result<WeightMatrix> {
    if cbs.len() != indices.rows() {
        return Err(Error::InvalidLayer(format!(
            "{} codebooks for {} channels",
            cbs.len(),
            indices.rows()
        )));
    }
    let size = 1usize << cbs.n_bits;
    let mut data = Vec::with_capacity(indices.len());
    for (r, row) in indices.indices().chunks(indices.cols().max(1)).enumerate() {
        let values = cbs.codebooks[r].values();
        for &i in row {
            if i as usize >= size {
                return Err(Error::IndexOutOfRange {
                    index: i as u32,
                    n_bits: cbs.n_bits,
                });
            }
            data.push(values[i as usize]);
        }
    }
    WeightMatrix::new(indices.rows(), indices.cols(), data)
}
