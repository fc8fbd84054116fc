//! V2a shared codebook library.
//!
//! Per-channel Lloyd codebooks are normalized (zero mean, unit max-abs
//! deviation) and condensed by k-means into a library of `L` codebooks. Each
//! weight group then picks the library entry that reconstructs it best under
//! its own affine map `w ≈ scale · entry[idx] + mid`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp16::Half;
use crate::lloyd::{nearest_index, ChannelCodebookSet, IndexMatrix};
use crate::par::map_indexed;
use crate::tensor::WeightMatrix;

pub const DEFAULT_LIBRARY_SIZE: usize = 32;
pub const DEFAULT_GROUP_SIZE: usize = 128;
/// Bits needed to address a 32-entry library.
pub const ASSIGNMENT_SEMANTIC_BITS: u32 = 5;
/// Assignments are stored byte-aligned.
pub const ASSIGNMENT_STORAGE_BITS: u32 = 8;
/// Stored bits per group: assignment byte, binary16 scale, binary16 mid-point.
pub const GROUP_OVERHEAD_BITS: u32 = ASSIGNMENT_STORAGE_BITS + 16 + 16;

/// Which way weight groups run through the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupOrientation {
    /// Contiguous weights within one channel row.
    #[default]
    Row,
    /// Contiguous weights down one input column.
    Column,
}

/// A run of positions in a row-major matrix: `start + i * stride` for
/// `i < len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpan {
    pub start: usize,
    pub len: usize,
    pub stride: usize,
}

impl GroupSpan {
    pub fn positions(self) -> impl Iterator<Item = usize> {
        (0..self.len).map(move |i| self.start + i * self.stride)
    }
}

/// Groups in storage order: channel by channel for rows, column by column for
/// columns. The final group of each line may be short.
pub fn group_spans(rows: usize, cols: usize, group_size: usize, orientation: GroupOrientation) -> Vec<GroupSpan> {
    assert!(group_size > 0, "group size must be positive");
    let mut spans = Vec::new();
    match orientation {
        GroupOrientation::Row => {
            for r in 0..rows {
                for start in (0..cols).step_by(group_size) {
                    spans.push(GroupSpan {
                        start: r * cols + start,
                        len: group_size.min(cols - start),
                        stride: 1,
                    });
                }
            }
        }
        GroupOrientation::Column => {
            for c in 0..cols {
                for start in (0..rows).step_by(group_size) {
                    spans.push(GroupSpan {
                        start: start * cols + c,
                        len: group_size.min(rows - start),
                        stride: cols,
                    });
                }
            }
        }
    }
    spans
}

pub fn group_count(rows: usize, cols: usize, group_size: usize, orientation: GroupOrientation) -> usize {
    match orientation {
        GroupOrientation::Row => rows * cols.div_ceil(group_size),
        GroupOrientation::Column => cols * rows.div_ceil(group_size),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodebookLibrary {
    n_bits: u8,
    /// `L` codebooks of `2^N` ascending entries.
    entries: Vec<Vec<Half>>,
}

impl CodebookLibrary {
    pub fn new(n_bits: u8, entries: Vec<Vec<Half>>) -> Result<Self> {
        let size = 1usize << n_bits;
        if entries.is_empty() || entries.len() > 256 {
            return Err(Error::InvalidLayer(format!(
                "library size {} outside 1..=256",
                entries.len()
            )));
        }
        for cb in &entries {
            if cb.len() != size {
                return Err(Error::InvalidLayer(format!(
                    "library codebook of length {} at N={n_bits}",
                    cb.len()
                )));
            }
            if cb.iter().any(|h| !h.is_finite()) {
                return Err(Error::InvalidLayer("library entry is not finite".into()));
            }
        }
        Ok(Self { n_bits, entries })
    }

    pub fn n_bits(&self) -> u8 {
        self.n_bits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Vec<Half>] {
        &self.entries
    }

    pub fn codebook(&self, idx: usize) -> &[Half] {
        &self.entries[idx]
    }

    pub fn byte_size(&self) -> usize {
        self.entries.len() * (1 << self.n_bits) * 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupAssignment {
    pub library_index: u8,
    pub scale: Half,
    pub mid: Half,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LibFitReport {
    pub sources: usize,
    pub distinct_sources: usize,
    /// Fewer distinct normalized sources than library slots, so some
    /// centroids coincide.
    pub duplicate_centroids: bool,
}

fn normalize(values: &[f32]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let spread = values.iter().map(|&v| (v as f64 - mean).abs()).fold(0.0, f64::max);
    if spread == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v as f64 - mean) / spread).collect()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist_sq(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Condense per-channel codebooks into a library of `l` codebooks.
pub fn libfit(
    channel_codebooks: &ChannelCodebookSet,
    l: usize,
    iters: usize,
) -> Result<(CodebookLibrary, LibFitReport)> {
    if channel_codebooks.is_empty() {
        return Err(Error::InvalidArgument(
            "libfit needs at least one source codebook".into(),
        ));
    }
    if l == 0 || l > 256 {
        return Err(Error::InvalidArgument(format!("library size {l} outside 1..=256")));
    }
    let points: Vec<Vec<f64>> = channel_codebooks
        .codebooks()
        .iter()
        .map(|cb| normalize(&cb.values()))
        .collect();

    let distinct = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len();

    // farthest-point seeding from the first source
    let mut centroids = vec![points[0].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| dist_sq(p, &points[0])).collect();
    while centroids.len() < l {
        let mut pick = 0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > min_d[pick] {
                pick = i;
            }
        }
        let seed = points[pick].clone();
        for (d, p) in min_d.iter_mut().zip(&points) {
            *d = d.min(dist_sq(p, &seed));
        }
        centroids.push(seed);
    }

    let dim = points[0].len();
    for _ in 0..iters {
        let assignment = map_indexed(points.len(), |i| nearest_centroid(&points[i], &centroids));
        let mut sums = vec![vec![0.0f64; dim]; l];
        let mut counts = vec![0usize; l];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = false;
        for ((c, s), &n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if n == 0 {
                continue;
            }
            let next: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
            moved |= next != *c;
            *c = next;
        }
        if !moved {
            break;
        }
    }

    let entries = centroids
        .into_iter()
        .map(|mut c| {
            c.sort_by(f64::total_cmp);
            c.into_iter().map(|v| Half::from_f32_saturating(v as f32)).collect()
        })
        .collect();
    let report = LibFitReport {
        sources: points.len(),
        distinct_sources: distinct,
        duplicate_centroids: distinct < l,
    };
    Ok((CodebookLibrary::new(channel_codebooks.n_bits(), entries)?, report))
}

#[inline]
fn affine_decode(scale: f32, entry: f32, mid: f32) -> f32 {
    scale * entry + mid
}

fn group_affine(values: &[f32]) -> (Half, Half) {
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    let mid = Half::from_f32_saturating(mean as f32);
    let m = mid.to_f32();
    let spread = values.iter().map(|&v| (v - m).abs()).fold(0.0f32, f32::max);
    let mut scale = Half::from_f32_saturating(spread);
    if scale.to_f32() == 0.0 {
        scale = Half::ONE;
    }
    (scale, mid)
}

struct GroupFit {
    assignment: GroupAssignment,
    indices: Vec<u8>,
    sse: f64,
}

fn fit_group(values: &[f32], library: &[Vec<f64>], fixed_entry: Option<usize>) -> GroupFit {
    let (scale, mid) = group_affine(values);
    let (s, m) = (scale.to_f32(), mid.to_f32());
    let normalized: Vec<f64> = values.iter().map(|&v| ((v - m) / s) as f64).collect();
    let mut best: Option<GroupFit> = None;
    let candidates: Box<dyn Iterator<Item = usize>> = match fixed_entry {
        Some(e) => Box::new(std::iter::once(e)),
        None => Box::new(0..library.len()),
    };
    for li in candidates {
        let entries = &library[li];
        let mut indices = Vec::with_capacity(values.len());
        let mut sse = 0.0f64;
        for (&v, &u) in values.iter().zip(&normalized) {
            let idx = nearest_index(entries, u);
            let recon = affine_decode(s, entries[idx] as f32, m);
            let d = recon as f64 - v as f64;
            sse += d * d;
            indices.push(idx as u8);
        }
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(GroupFit {
                assignment: GroupAssignment {
                    library_index: li as u8,
                    scale,
                    mid,
                },
                indices,
                sse,
            });
        }
    }
    best.expect("library is non-empty")
}

fn library_f64(library: &CodebookLibrary) -> Vec<Vec<f64>> {
    library
        .entries
        .iter()
        .map(|cb| cb.iter().map(|h| h.to_f32() as f64).collect())
        .collect()
}

fn assign_with(
    bulk: &WeightMatrix,
    library: &CodebookLibrary,
    group_size: usize,
    orientation: GroupOrientation,
    fixed_entry: Option<usize>,
) -> Result<(Vec<GroupAssignment>, IndexMatrix, f64)> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group size must be positive".into()));
    }
    let lib = library_f64(library);
    let spans = group_spans(bulk.rows(), bulk.cols(), group_size, orientation);
    let data = bulk.data();
    let fits = map_indexed(spans.len(), |g| {
        let values: Vec<f32> = spans[g].positions().map(|p| data[p]).collect();
        fit_group(&values, &lib, fixed_entry)
    });
    let mut indices = vec![0u8; bulk.numel()];
    let mut assignments = Vec::with_capacity(fits.len());
    let mut sse = 0.0;
    for (span, fit) in spans.iter().zip(fits) {
        for (p, i) in span.positions().zip(fit.indices) {
            indices[p] = i;
        }
        sse += fit.sse;
        assignments.push(fit.assignment);
    }
    Ok((assignments, IndexMatrix::new(bulk.rows(), bulk.cols(), indices)?, sse))
}

/// Pick, for every group, the library entry with the lowest reconstruction
/// SSE (ties to the lower library index).
pub fn assign_groups(
    bulk: &WeightMatrix,
    library: &CodebookLibrary,
    group_size: usize,
    orientation: GroupOrientation,
) -> Result<(Vec<GroupAssignment>, IndexMatrix)> {
    let (a, i, _) = assign_with(bulk, library, group_size, orientation, None)?;
    Ok((a, i))
}

/// Total SSE when every group is forced onto one library entry.
pub fn single_entry_sse(
    bulk: &WeightMatrix,
    library: &CodebookLibrary,
    group_size: usize,
    orientation: GroupOrientation,
    entry: usize,
) -> Result<f64> {
    if entry >= library.len() {
        return Err(Error::InvalidArgument(format!("library entry {entry} out of range")));
    }
    Ok(assign_with(bulk, library, group_size, orientation, Some(entry))?.2)
}

/// Codebook-only reconstruction of a V2a layer.
pub fn reconstruct(
    indices: &IndexMatrix,
    library: &CodebookLibrary,
    assignments: &[GroupAssignment],
    group_size: usize,
    orientation: GroupOrientation,
) -> Result<WeightMatrix> {
    if group_size == 0 {
        return Err(Error::InvalidLayer("group size must be positive".into()));
    }
    let (rows, cols) = (indices.rows(), indices.cols());
    let spans = group_spans(rows, cols, group_size, orientation);
    if spans.len() != assignments.len() {
        return Err(Error::InvalidLayer(format!(
            "{} group assignments for {} groups",
            assignments.len(),
            spans.len()
        )));
    }
    let size = 1usize << library.n_bits();
    let mut data = vec![0.0f32; rows * cols];
    let idx = indices.indices();
    for (span, a) in spans.iter().zip(assignments) {
        let li = a.library_index as usize;
        if li >= library.len() {
            return Err(Error::InvalidLayer(format!(
                "group assignment {li} outside library of {}",
                library.len()
            )));
        }
        let cb = library.codebook(li);
        let (s, m) = (a.scale.to_f32(), a.mid.to_f32());
        for p in span.positions() {
            let i = idx[p] as usize;
            if i >= size {
                return Err(Error::IndexOutOfRange {
                    index: i as u32,
                    n_bits: library.n_bits(),
                });
            }
            data[p] = affine_decode(s, cb[i].to_f32(), m);
        }
    }
    WeightMatrix::new(rows, cols, data)
}
