//! Browser bindings for the interactive demo page.
//!
//! Every export takes plain numbers and strings and returns a JSON string;
//! errors surface as thrown JavaScript strings. The `*_json` functions hold
//! the logic and run natively for tests.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;
use xfp_core::autoselect::{decide, dispatch_tau, evaluate_candidates};
use xfp_core::container::{effective_bits_for, encode_layer_at, outlier_effect_of, Payload};
use xfp_core::hprocess::break_even_outlier_fraction;
use xfp_core::packing::v2a_lane_geometry;
use xfp_core::{extract_outliers, synth, LayerClass, Mode, QualityPolicy};

const HISTOGRAM_BINS: usize = 80;
const MAX_OUTLIER_POINTS: usize = 256;
/// Largest matrix the page may request, in weights.
const MAX_NUMEL: usize = 1 << 20;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check_dims(rows: usize, cols: usize) -> Result<(), String> {
    if rows == 0 || cols == 0 || rows.saturating_mul(cols) > MAX_NUMEL {
        return Err(format!("matrix must have between 1 and {MAX_NUMEL} weights"));
    }
    Ok(())
}

fn histogram(values: &[f64], lo: f64, hi: f64) -> Vec<u32> {
    let mut bins = vec![0u32; HISTOGRAM_BINS];
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    for &v in values {
        let b = (((v - lo) / width) * HISTOGRAM_BINS as f64) as usize;
        bins[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    bins
}

/// Synthesize a matrix, encode it with per-channel codebooks at `n_bits`,
/// and report the bulk histogram, the first channel's codebook, the
/// extracted outliers and reconstruction quality with and without them.
pub fn explore_codebook_json(
    profile: &str,
    rows: usize,
    cols: usize,
    seed: u64,
    n_bits: u8,
    k: f64,
) -> Result<String, String> {
    check_dims(rows, cols)?;
    let p = synth::profile(profile).map_err(err)?;
    let w = synth::generate(&p, rows, cols, seed).map_err(err)?;
    let policy = QualityPolicy {
        k,
        ..QualityPolicy::default()
    };
    policy.validate().map_err(err)?;
    let (bulk, outliers) = extract_outliers(&w, k, policy.cap_fraction);
    let layer = encode_layer_at("demo", &w, LayerClass::SelfAttention, &policy, Mode::V2, n_bits).map_err(err)?;
    let quality = outlier_effect_of(&w, &layer, &policy).map_err(err)?;

    let bulk_values: Vec<f64> = bulk.matrix().data().iter().map(|&v| v as f64).collect();
    let lo = bulk_values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = bulk_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let codebook: Vec<f32> = match &layer.payload {
        Payload::V2(set) => set.codebooks()[0].values(),
        Payload::V2a { .. } => Vec::new(),
    };
    let outlier_values: Vec<f32> = outliers
        .entries
        .iter()
        .take(MAX_OUTLIER_POINTS)
        .map(|e| w.get(e.row, e.col))
        .collect();
    let bits = xfp_core::effective_bits(&layer);
    Ok(json!({
        "profile": p.name,
        "rows": rows,
        "cols": cols,
        "n_bits": n_bits,
        "mu": outliers.mu_used,
        "sigma": outliers.sigma_used,
        "threshold": k * outliers.sigma_used,
        "histogram": { "lo": lo, "hi": hi, "counts": histogram(&bulk_values, lo, hi) },
        "codebook": codebook,
        "outlier_count": outliers.len(),
        "outlier_values": outlier_values,
        "cos_bulk": quality.median_cos_bulk,
        "cos_outlier": quality.median_cos,
        "mse_ratio": quality.mse_ratio,
        "effective_bits": bits,
    })
    .to_string())
}

/// Median cosine of every candidate width and the width auto-select picks as
/// the floor varies.
pub fn threshold_curve_json(
    profile: &str,
    rows: usize,
    cols: usize,
    seed: u64,
    mode: &str,
    class: &str,
) -> Result<String, String> {
    check_dims(rows, cols)?;
    let mode: Mode = mode.parse().map_err(err)?;
    let class: LayerClass = class.parse().map_err(err)?;
    let p = synth::profile(profile).map_err(err)?;
    let w = synth::generate(&p, rows, cols, seed).map_err(err)?;
    let policy = QualityPolicy::default();
    let scores = evaluate_candidates(&w, class, &policy, mode).map_err(err)?;
    let (_, outliers) = extract_outliers(&w, policy.k, policy.cap_fraction);
    let candidates: Vec<Value> = scores
        .iter()
        .map(|s| {
            let bits = effective_bits_for(
                mode,
                s.n_bits,
                rows,
                cols,
                policy.group_size,
                policy.library_size,
                outliers.len(),
            )
            .map(|b| b.total)
            .unwrap_or(f64::NAN);
            json!({ "n_bits": s.n_bits, "median_cos": s.median_cos, "effective_bits": bits })
        })
        .collect();
    let curve: Vec<Value> = (0..=200)
        .map(|i| {
            let tau = 0.8 + 0.001 * i as f64;
            let (n, fallback) = decide(&scores, tau);
            json!({ "tau": tau, "n_bits": n, "fallback": fallback })
        })
        .collect();
    let default_tau = dispatch_tau(class, &policy);
    let (default_n, default_fallback) = decide(&scores, default_tau);
    Ok(json!({
        "profile": p.name,
        "mode": mode,
        "class": class,
        "candidates": candidates,
        "curve": curve,
        "default": { "tau": default_tau, "n_bits": default_n, "fallback": default_fallback },
    })
    .to_string())
}

/// Break-even outlier density and V2a lane geometry for every width at
/// `group_size`.
pub fn planner_json(
    bits_low: f64,
    bits_high: f64,
    cap: f64,
    bytes_per_outlier: f64,
    group_size: usize,
) -> Result<String, String> {
    let fraction = break_even_outlier_fraction(bits_low, bits_high, cap, bytes_per_outlier).map_err(err)?;
    let geometry: Vec<Value> = (2u8..=6)
        .map(|n| {
            let v = v2a_lane_geometry(n, group_size).map_err(err)?;
            let mut row = serde_json::to_value(&v).map_err(err)?;
            row["n_bits"] = json!(n);
            Ok(row)
        })
        .collect::<Result<_, String>>()?;
    Ok(json!({ "fraction": fraction, "group_size": group_size, "geometry": geometry }).to_string())
}

#[wasm_bindgen]
pub fn profile_names() -> String {
    let mut names: Vec<&str> = synth::profile_aliases().map(|(a, _)| a).collect();
    names.extend(synth::profile_names());
    serde_json::to_string(&names).unwrap_or_else(|_| "[]".into())
}

#[wasm_bindgen]
pub fn explore_codebook(
    profile: &str,
    rows: usize,
    cols: usize,
    seed: u32,
    n_bits: u8,
    k: f64,
) -> Result<String, JsValue> {
    explore_codebook_json(profile, rows, cols, seed as u64, n_bits, k).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn threshold_curve(
    profile: &str,
    rows: usize,
    cols: usize,
    seed: u32,
    mode: &str,
    class: &str,
) -> Result<String, JsValue> {
    threshold_curve_json(profile, rows, cols, seed as u64, mode, class).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn planner(
    bits_low: f64,
    bits_high: f64,
    cap: f64,
    bytes_per_outlier: f64,
    group_size: usize,
) -> Result<String, JsValue> {
    planner_json(bits_low, bits_high, cap, bytes_per_outlier, group_size).map_err(|e| JsValue::from_str(&e))
}
