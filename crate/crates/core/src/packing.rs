//! Sub-byte index packing.
//!
//! Indices are packed row-major, `values_per_word` to a word, slot 0 in the
//! least significant bits. Bits above `used_bits` (the reserve) and slots past
//! the last element of the final word are always zero; `unpack` rejects words
//! where they are not.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lloyd::IndexMatrix;

/// Threads per warp on the decode target; only the lane geometry uses it.
pub const WARP_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PackingScheme {
    pub n_bits: u8,
    pub values_per_word: usize,
    pub word_bits: u32,
    pub used_bits: u32,
    pub reserve_bits: u32,
}

pub const SCHEMES: [PackingScheme; 5] = [
    PackingScheme {
        n_bits: 2,
        values_per_word: 16,
        word_bits: 32,
        used_bits: 32,
        reserve_bits: 0,
    },
    PackingScheme {
        n_bits: 3,
        values_per_word: 10,
        word_bits: 32,
        used_bits: 30,
        reserve_bits: 2,
    },
    PackingScheme {
        n_bits: 4,
        values_per_word: 8,
        word_bits: 32,
        used_bits: 32,
        reserve_bits: 0,
    },
    PackingScheme {
        n_bits: 5,
        values_per_word: 3,
        word_bits: 16,
        used_bits: 15,
        reserve_bits: 1,
    },
    PackingScheme {
        n_bits: 6,
        values_per_word: 5,
        word_bits: 32,
        used_bits: 30,
        reserve_bits: 2,
    },
];

impl PackingScheme {
    pub fn for_bits(n_bits: u8) -> Result<Self> {
        SCHEMES
            .iter()
            .copied()
            .find(|s| s.n_bits == n_bits)
            .ok_or(Error::UnsupportedBits(n_bits))
    }

    /// Storage cost per index including reserve bits.
    pub fn bits_per_weight(&self) -> f64 {
        self.word_bits as f64 / self.values_per_word as f64
    }

    pub fn word_count(&self, elements: usize) -> usize {
        elements.div_ceil(self.values_per_word)
    }

    pub fn word_bytes(&self) -> usize {
        self.word_bits as usize / 8
    }

    fn slot_mask(&self) -> u32 {
        (1u32 << self.n_bits) - 1
    }

    fn used_mask(&self) -> u32 {
        if self.used_bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.used_bits) - 1
        }
    }
}

/// Packed index words. Words of 16-bit schemes are held widened to `u32`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedIndices {
    words: Vec<u32>,
    scheme: PackingScheme,
    rows: usize,
    cols: usize,
}

impl PackedIndices {
    /// Wrap words read from storage; validated by `unpack`.
    pub fn from_words(words: Vec<u32>, n_bits: u8, rows: usize, cols: usize) -> Result<Self> {
        let scheme = PackingScheme::for_bits(n_bits)?;
        if words.len() != scheme.word_count(rows * cols) {
            return Err(Error::InvalidLayer(format!(
                "{} packed words for {} indices at N={n_bits}",
                words.len(),
                rows * cols
            )));
        }
        Ok(Self {
            words,
            scheme,
            rows,
            cols,
        })
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn scheme(&self) -> PackingScheme {
        self.scheme
    }

    pub fn element_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn byte_size(&self) -> usize {
        self.words.len() * self.scheme.word_bytes()
    }
}

pub fn pack(indices: &IndexMatrix, n_bits: u8) -> Result<PackedIndices> {
    let scheme = PackingScheme::for_bits(n_bits)?;
    let limit = 1u32 << n_bits;
    let mut words = Vec::with_capacity(scheme.word_count(indices.len()));
    for chunk in indices.indices().chunks(scheme.values_per_word) {
        let mut word = 0u32;
        for (slot, &v) in chunk.iter().enumerate() {
            if v as u32 >= limit {
                return Err(Error::IndexOutOfRange {
                    index: v as u32,
                    n_bits,
                });
            }
            word |= (v as u32) << (slot as u32 * n_bits as u32);
        }
        words.push(word);
    }
    Ok(PackedIndices {
        words,
        scheme,
        rows: indices.rows(),
        cols: indices.cols(),
    })
}

pub fn unpack(packed: &PackedIndices) -> Result<IndexMatrix> {
    let scheme = packed.scheme;
    let total = packed.element_count();
    if packed.words.len() != scheme.word_count(total) {
        return Err(Error::InvalidLayer("packed word count does not match shape".into()));
    }
    let n = scheme.n_bits as u32;
    let mask = scheme.slot_mask();
    let mut out = Vec::with_capacity(total);
    for (w, &word) in packed.words.iter().enumerate() {
        let slots = (total - w * scheme.values_per_word).min(scheme.values_per_word);
        let live = if slots as u32 * n >= 32 {
            u32::MAX
        } else {
            (1u32 << (slots as u32 * n)) - 1
        };
        if word & !scheme.used_mask() != 0 || word & !live != 0 {
            return Err(Error::CorruptPacking { word: w });
        }
        out.extend((0..slots).map(|s| ((word >> (s as u32 * n)) & mask) as u8));
    }
    IndexMatrix::new(packed.rows, packed.cols, out)
}

/// Outcome of the V2a lane-geometry check for a bit width and group size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum GeometryVerdict {
    Admissible { lanes_per_group: usize, cb_per_iter: usize },
    Inadmissible { reason: String },
}

impl GeometryVerdict {
    pub fn is_admissible(&self) -> bool {
        matches!(self, GeometryVerdict::Admissible { .. })
    }
}

/// A group of `group_size` weights is walked by `group_size / values_per_word`
/// lanes, and a warp must hold a whole number of groups. N=5 and N=6 are
/// excluded outright: their codebooks do not fit the warp-wide lookup table.
pub fn v2a_lane_geometry(n_bits: u8, group_size: usize) -> Result<GeometryVerdict> {
    let scheme = PackingScheme::for_bits(n_bits)?;
    let vpw = scheme.values_per_word;
    let verdict = if n_bits >= 5 {
        GeometryVerdict::Inadmissible {
            reason: format!("N={n_bits} exceeds the warp-wide lookup-table budget"),
        }
    } else if group_size == 0 || !group_size.is_multiple_of(vpw) {
        GeometryVerdict::Inadmissible {
            reason: format!("group size {group_size} mod {vpw} values/word != 0"),
        }
    } else {
        let lanes = group_size / vpw;
        if lanes > WARP_SIZE || !WARP_SIZE.is_multiple_of(lanes) {
            GeometryVerdict::Inadmissible {
                reason: format!("warp size {WARP_SIZE} mod {lanes} lanes/group != 0"),
            }
        } else {
            GeometryVerdict::Admissible {
                lanes_per_group: lanes,
                cb_per_iter: WARP_SIZE / lanes,
            }
        }
    };
    Ok(verdict)
}
