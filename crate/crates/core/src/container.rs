//! Quantized layers, their scalar reference decoder, storage accounting and
//! the `.xfpq` container.
//!
//! # `.xfpq` layout (little-endian throughout)
//!
//! ```text
//! file    := "XFPQ" u16 version(=1) u16 layer_count layer*
//! layer   := u32 record_len record u32 crc32(record)
//! record  := u8 mode (0 = V2, 1 = V2a)
//!            u8 n_bits
//!            u8 class (0 self_attention, 1 linear_attention, 2 shared_expert,
//!                      3 routed_expert, 4 lm_head)
//!            u8 flags (bit0 overwrite residuals, bit1 column-oriented groups)
//!            u32 rows  u32 cols  u32 group_size
//!            u32 codebook_count  u32 assignment_count
//!            u32 word_count      u32 outlier_count
//!            f64 k  f64 cap_fraction  f64 mu  f64 sigma
//!            u16 name_len  name_len bytes of UTF-8 name
//!            codebooks    codebook_count * 2^n_bits * u16 (binary16 bits)
//!            assignments  assignment_count * (u8 index, u16 scale, u16 mid)
//!            words        word_count * (u16 when the scheme word is 16 bits, else u32)
//!            outliers     outlier_count * (i64 row, i64 col, u16 value)
//! ```
//!
//! V2 layers store one codebook per row and no assignments; V2a layers store
//! the library in the codebook section and one assignment per group.

use std::path::Path;

use serde::Serialize;

use crate::autoselect::{
    fit_candidate, select_and_fit, AutoSelectReport, CandidateFit, LayerClass, Mode, QualityPolicy,
};
use crate::error::{Error, Result};
use crate::fp16::Half;
use crate::library::{self, group_count, CodebookLibrary, GroupAssignment, GroupOrientation, GROUP_OVERHEAD_BITS};
use crate::lloyd::{self, ChannelCodebook, ChannelCodebookSet};
use crate::outlier::{
    apply_outliers, extract_outliers, OutlierEntry, OutlierSet, ResidualConvention, BYTES_PER_OUTLIER,
};
use crate::packing::{pack, unpack, v2a_lane_geometry, PackedIndices, PackingScheme};
use crate::tensor::{QualityReport, WeightMatrix};

pub const MAGIC: [u8; 4] = *b"XFPQ";
pub const VERSION: u16 = 1;

const FLAG_OVERWRITE: u8 = 1;
const FLAG_COLUMN: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    V2(ChannelCodebookSet),
    V2a {
        library: CodebookLibrary,
        assignments: Vec<GroupAssignment>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub mode: Mode,
    pub n_bits: u8,
    pub class: LayerClass,
    pub rows: usize,
    pub cols: usize,
    /// Group size of V2a layers; zero for V2.
    pub group_size: usize,
    pub residual_convention: ResidualConvention,
    pub group_orientation: GroupOrientation,
    pub packed: PackedIndices,
    pub payload: Payload,
    pub outliers: OutlierSet,
}

impl QuantizedLayer {
    /// Structural consistency of every section with the header fields.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidLayer(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("empty shape {}x{}", self.rows, self.cols));
        }
        if self.packed.shape() != (self.rows, self.cols) {
            return bad("packed index shape differs from layer shape".into());
        }
        if self.packed.scheme().n_bits != self.n_bits {
            return bad("packed scheme width differs from layer width".into());
        }
        match (&self.payload, self.mode) {
            (Payload::V2(cbs), Mode::V2) => {
                if cbs.n_bits() != self.n_bits || cbs.len() != self.rows {
                    return bad(format!(
                        "{} codebooks at N={} for {} rows at N={}",
                        cbs.len(),
                        cbs.n_bits(),
                        self.rows,
                        self.n_bits
                    ));
                }
            }
            (Payload::V2a { library, assignments }, Mode::V2a) => {
                if !v2a_lane_geometry(self.n_bits, self.group_size)?.is_admissible() {
                    return bad(format!(
                        "V2a at N={} with group size {} is not lane-admissible",
                        self.n_bits, self.group_size
                    ));
                }
                if library.n_bits() != self.n_bits {
                    return bad("library width differs from layer width".into());
                }
                let groups = group_count(self.rows, self.cols, self.group_size, self.group_orientation);
                if assignments.len() != groups {
                    return bad(format!("{} assignments for {groups} groups", assignments.len()));
                }
                if let Some(a) = assignments.iter().find(|a| a.library_index as usize >= library.len()) {
                    return bad(format!(
                        "assignment {} outside library of {}",
                        a.library_index,
                        library.len()
                    ));
                }
            }
            _ => return bad("payload does not match layer mode".into()),
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

fn layer_from_fit(
    name: &str,
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
    fit: CandidateFit,
) -> Result<QuantizedLayer> {
    Ok(QuantizedLayer {
        name: name.to_string(),
        mode,
        n_bits: fit.n_bits,
        class,
        rows: w.rows(),
        cols: w.cols(),
        group_size: match mode {
            Mode::V2 => 0,
            Mode::V2a => policy.group_size,
        },
        residual_convention: policy.residual_convention,
        group_orientation: policy.group_orientation,
        packed: pack(&fit.indices, fit.n_bits)?,
        payload: fit.payload,
        outliers: fit.outliers,
    })
}

/// Full pipeline: outlier extraction, auto-select, fit, assignment,
/// residual finalization and packing.
pub fn encode_layer_with_report(
    name: &str,
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
) -> Result<(QuantizedLayer, AutoSelectReport)> {
    let (report, fit) = select_and_fit(w, class, policy, mode)?;
    let fit = if fit.n_bits == report.chosen_n {
        fit
    } else {
        encode_fit(w, class, policy, mode, report.chosen_n)?
    };
    Ok((layer_from_fit(name, w, class, policy, mode, fit)?, report))
}

pub fn encode_layer(w: &WeightMatrix, class: LayerClass, policy: &QualityPolicy, mode: Mode) -> Result<QuantizedLayer> {
    Ok(encode_layer_with_report("", w, class, policy, mode)?.0)
}

fn encode_fit(
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
    n_bits: u8,
) -> Result<CandidateFit> {
    let (bulk, raw) = extract_outliers(w, policy.k, policy.cap_fraction);
    fit_candidate(w, &bulk, &raw, n_bits, mode, class, policy)
}

/// Encode at a fixed bit width, bypassing auto-select.
pub fn encode_layer_at(
    name: &str,
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
    n_bits: u8,
) -> Result<QuantizedLayer> {
    PackingScheme::for_bits(n_bits)?;
    if mode == Mode::V2a && !v2a_lane_geometry(n_bits, policy.group_size)?.is_admissible() {
        return Err(Error::InvalidArgument(format!(
            "V2a at N={n_bits} with group size {} is not lane-admissible",
            policy.group_size
        )));
    }
    let fit = encode_fit(w, class, policy, mode, n_bits)?;
    layer_from_fit(name, w, class, policy, mode, fit)
}

/// Quality of `w` encoded at `n_bits` with and without outlier extraction.
/// The baseline ("bulk") fits the same mode and width on the raw matrix with
/// no outlier path; the "full" side is the normal pipeline.
pub fn outlier_effect(
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
    n_bits: u8,
) -> Result<QualityReport> {
    let with = encode_layer_at("", w, class, policy, mode, n_bits)?;
    outlier_effect_of(w, &with, policy)
}

/// As [`outlier_effect`], for an already encoded layer of `w`.
pub fn outlier_effect_of(w: &WeightMatrix, layer: &QuantizedLayer, policy: &QualityPolicy) -> Result<QualityReport> {
    let plain = QualityPolicy {
        k: f64::INFINITY,
        group_size: if layer.mode == Mode::V2a {
            layer.group_size
        } else {
            policy.group_size
        },
        group_orientation: layer.group_orientation,
        ..policy.clone()
    };
    let without = encode_layer_at("", w, layer.class, &plain, layer.mode, layer.n_bits)?;
    QualityReport::new(w, &decode_layer(&without)?, &decode_layer(layer)?)
}

/// Codebook-only reconstruction (outliers not applied).
pub fn decode_bulk(layer: &QuantizedLayer) -> Result<WeightMatrix> {
    layer.validate()?;
    let indices = unpack(&layer.packed)?;
    match &layer.payload {
        Payload::V2(cbs) => lloyd::reconstruct(&indices, cbs),
        Payload::V2a { library, assignments } => library::reconstruct(
            &indices,
            library,
            assignments,
            layer.group_size,
            layer.group_orientation,
        ),
    }
}

/// Scalar reference decode: unpack, gather, scatter outliers.
pub fn decode_layer(layer: &QuantizedLayer) -> Result<WeightMatrix> {
    let bulk = decode_bulk(layer)?;
    let (rows, cols) = bulk.shape();
    let mut data = bulk.into_data();
    apply_outliers(&mut data, rows, cols, &layer.outliers, layer.residual_convention)?;
    WeightMatrix::new(rows, cols, data)
}

/// Storage cost in bits per weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectiveBits {
    pub index_bits_per_weight: f64,
    pub codebook_overhead_bits_per_weight: f64,
    pub outlier_bits_per_weight: f64,
    /// Sum of all three parts.
    pub total: f64,
    /// Index and codebook parts only.
    pub total_without_outliers: f64,
}

/// Accounting from layer parameters alone; `library_size` is ignored for V2.
pub fn effective_bits_for(
    mode: Mode,
    n_bits: u8,
    rows: usize,
    cols: usize,
    group_size: usize,
    library_size: usize,
    outlier_count: usize,
) -> Result<EffectiveBits> {
    let scheme = PackingScheme::for_bits(n_bits)?;
    let numel = (rows * cols) as f64;
    let entries = (1usize << n_bits) as f64;
    let index = scheme.bits_per_weight();
    let codebook = match mode {
        Mode::V2 => entries * 16.0 * rows as f64 / numel,
        Mode::V2a => {
            if group_size == 0 {
                return Err(Error::InvalidArgument("group size must be positive".into()));
            }
            GROUP_OVERHEAD_BITS as f64 / group_size as f64 + library_size as f64 * entries * 16.0 / numel
        }
    };
    let outlier = (BYTES_PER_OUTLIER * 8) as f64 * outlier_count as f64 / numel;
    Ok(EffectiveBits {
        index_bits_per_weight: index,
        codebook_overhead_bits_per_weight: codebook,
        outlier_bits_per_weight: outlier,
        total: index + codebook + outlier,
        total_without_outliers: index + codebook,
    })
}

pub fn effective_bits(layer: &QuantizedLayer) -> EffectiveBits {
    let library_size = match &layer.payload {
        Payload::V2(_) => 0,
        Payload::V2a { library, .. } => library.len(),
    };
    effective_bits_for(
        layer.mode,
        layer.n_bits,
        layer.rows,
        layer.cols,
        layer.group_size,
        library_size,
        layer.outliers.len(),
    )
    .expect("validated layer has a packing scheme")
}

/// Bytes the layer occupies in a `.xfpq` file, excluding framing.
pub fn record_bytes(layer: &QuantizedLayer) -> usize {
    encode_record(layer).len()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn new(layers: Vec<QuantizedLayer>) -> Self {
        Self { layers }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u16::try_from(self.layers.len())
            .map_err(|_| Error::InvalidArgument(format!("{} layers exceed container limit", self.layers.len())))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for layer in &self.layers {
            layer.validate()?;
            if layer.name.len() > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!(
                    "layer name of {} bytes too long",
                    layer.name.len()
                )));
            }
            let record = encode_record(layer);
            let len =
                u32::try_from(record.len()).map_err(|_| Error::InvalidArgument("layer record exceeds 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&record);
            out.extend_from_slice(&crc32fast::hash(&record).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: MAGIC,
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u16("layer count")? as usize;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let len = r.u32("record length")? as usize;
            let record = r.take(len, "layer record")?;
            let stored = r.u32("layer checksum")?;
            let computed = crc32fast::hash(record);
            if stored != computed {
                return Err(Error::Checksum {
                    layer: i,
                    stored,
                    computed,
                });
            }
            layers.push(decode_record(record)?);
        }
        if !r.is_empty() {
            return Err(Error::InvalidLayer(format!(
                "{} trailing bytes after last layer",
                r.remaining()
            )));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn encode_record(layer: &QuantizedLayer) -> Vec<u8> {
    let mut out = Vec::new();
    let mut flags = 0u8;
    if layer.residual_convention == ResidualConvention::Overwrite {
        flags |= FLAG_OVERWRITE;
    }
    if layer.group_orientation == GroupOrientation::Column {
        flags |= FLAG_COLUMN;
    }
    let (codebooks, assignments): (Vec<&[Half]>, &[GroupAssignment]) = match &layer.payload {
        Payload::V2(cbs) => (cbs.codebooks().iter().map(ChannelCodebook::entries).collect(), &[]),
        Payload::V2a { library, assignments } => (library.entries().iter().map(Vec::as_slice).collect(), assignments),
    };
    out.push(match layer.mode {
        Mode::V2 => 0,
        Mode::V2a => 1,
    });
    out.push(layer.n_bits);
    out.push(layer.class.tag());
    out.push(flags);
    for v in [
        layer.rows,
        layer.cols,
        layer.group_size,
        codebooks.len(),
        assignments.len(),
        layer.packed.words().len(),
        layer.outliers.len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let o = &layer.outliers;
    for v in [o.k, o.cap_fraction, o.mu_used, o.sigma_used] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
    out.extend_from_slice(layer.name.as_bytes());
    for cb in codebooks {
        for h in cb {
            out.extend_from_slice(&h.to_bits().to_le_bytes());
        }
    }
    for a in assignments {
        out.push(a.library_index);
        out.extend_from_slice(&a.scale.to_bits().to_le_bytes());
        out.extend_from_slice(&a.mid.to_bits().to_le_bytes());
    }
    let narrow = layer.packed.scheme().word_bits == 16;
    for &w in layer.packed.words() {
        if narrow {
            out.extend_from_slice(&(w as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    for e in &o.entries {
        out.extend_from_slice(&(e.row as i64).to_le_bytes());
        out.extend_from_slice(&(e.col as i64).to_le_bytes());
        out.extend_from_slice(&e.value.to_bits().to_le_bytes());
    }
    out
}

fn decode_record(bytes: &[u8]) -> Result<QuantizedLayer> {
    let mut r = Reader::new(bytes);
    let mode = match r.u8("mode")? {
        0 => Mode::V2,
        1 => Mode::V2a,
        m => return Err(Error::InvalidLayer(format!("unknown mode tag {m}"))),
    };
    let n_bits = r.u8("bit width")?;
    let scheme = PackingScheme::for_bits(n_bits)?;
    let class = LayerClass::from_tag(r.u8("class")?)?;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_OVERWRITE | FLAG_COLUMN) != 0 {
        return Err(Error::InvalidLayer(format!("unknown flag bits {flags:#04x}")));
    }
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let group_size = r.u32("group size")? as usize;
    let codebook_count = r.u32("codebook count")? as usize;
    let assignment_count = r.u32("assignment count")? as usize;
    let word_count = r.u32("word count")? as usize;
    let outlier_count = r.u32("outlier count")? as usize;
    let k = r.f64("k")?;
    let cap_fraction = r.f64("cap fraction")?;
    let mu_used = r.f64("mu")?;
    let sigma_used = r.f64("sigma")?;
    let name_len = r.u16("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "name")?)
        .map_err(|_| Error::InvalidLayer("layer name is not UTF-8".into()))?
        .to_string();

    let entries = 1usize << n_bits;
    // Section sizes are checked against the remaining bytes before allocating.
    let need = codebook_count
        .checked_mul(entries * 2)
        .and_then(|c| c.checked_add(assignment_count.checked_mul(5)?))
        .and_then(|c| c.checked_add(word_count.checked_mul(scheme.word_bytes())?))
        .and_then(|c| c.checked_add(outlier_count.checked_mul(BYTES_PER_OUTLIER)?))
        .ok_or(Error::Truncated("layer sections"))?;
    if need > r.remaining() {
        return Err(Error::Truncated("layer sections"));
    }

    let mut codebooks = Vec::with_capacity(codebook_count);
    for _ in 0..codebook_count {
        let mut cb = Vec::with_capacity(entries);
        for _ in 0..entries {
            cb.push(Half::from_bits(r.u16("codebook")?)?);
        }
        codebooks.push(cb);
    }
    let mut assignments = Vec::with_capacity(assignment_count);
    for _ in 0..assignment_count {
        assignments.push(GroupAssignment {
            library_index: r.u8("assignment")?,
            scale: Half::from_bits(r.u16("assignment")?)?,
            mid: Half::from_bits(r.u16("assignment")?)?,
        });
    }
    let mut words = Vec::with_capacity(word_count);
    for _ in 0..word_count {
        words.push(if scheme.word_bits == 16 {
            r.u16("packed words")? as u32
        } else {
            r.u32("packed words")?
        });
    }
    let mut outlier_entries = Vec::with_capacity(outlier_count);
    for _ in 0..outlier_count {
        let row = r.i64("outliers")?;
        let col = r.i64("outliers")?;
        let value = Half::from_bits(r.u16("outliers")?)?;
        if row < 0 || col < 0 || row as usize >= rows || col as usize >= cols {
            return Err(Error::OutlierOutOfBounds {
                row: row.max(0) as usize,
                col: col.max(0) as usize,
                rows,
                cols,
            });
        }
        outlier_entries.push(OutlierEntry {
            row: row as usize,
            col: col as usize,
            value,
        });
    }
    if !r.is_empty() {
        return Err(Error::InvalidLayer(format!(
            "{} trailing bytes in layer record",
            r.remaining()
        )));
    }

    let payload = match mode {
        Mode::V2 => {
            let cbs = codebooks
                .into_iter()
                .map(ChannelCodebook::new)
                .collect::<Result<Vec<_>>>()?;
            Payload::V2(ChannelCodebookSet::new(n_bits, cbs)?)
        }
        Mode::V2a => Payload::V2a {
            library: CodebookLibrary::new(n_bits, codebooks)?,
            assignments,
        },
    };
    let layer = QuantizedLayer {
        name,
        mode,
        n_bits,
        class,
        rows,
        cols,
        group_size,
        residual_convention: if flags & FLAG_OVERWRITE != 0 {
            ResidualConvention::Overwrite
        } else {
            ResidualConvention::Add
        },
        group_orientation: if flags & FLAG_COLUMN != 0 {
            GroupOrientation::Column
        } else {
            GroupOrientation::Row
        },
        packed: PackedIndices::from_words(words, n_bits, rows, cols)?,
        payload,
        outliers: OutlierSet {
            entries: outlier_entries,
            k,
            cap_fraction,
            mu_used,
            sigma_used,
        },
    };
    layer.validate()?;
    Ok(layer)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn i64(&mut self, what: &'static str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len()
    }

    fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}
