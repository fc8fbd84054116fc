//! Codebook weight quantization with sparse outlier residuals.
//!
//! A weight matrix is split into a dense bulk, quantized against learned
//! per-channel (V2) or shared-library (V2a) codebooks, plus a sparse set of
//! binary16 outlier residuals. Bit widths are chosen per layer by a median
//! per-channel cosine gate.

pub mod autoselect;
pub mod container;
pub mod error;
pub mod fp16;
pub mod hprocess;
pub mod library;
pub mod lloyd;
pub mod outlier;
pub mod packing;
pub mod synth;
pub mod tensor;
pub mod xwt;

mod par;

pub use autoselect::{auto_select, moe_sample_select, AutoSelectReport, LayerClass, Mode, QualityPolicy};
pub use container::{decode_layer, effective_bits, encode_layer, EffectiveBits, QuantizedLayer, QuantizedModel};
pub use error::{Error, Result};
pub use fp16::Half;
pub use outlier::{extract_outliers, OutlierSet};
pub use tensor::WeightMatrix;
