//! Operating-point planning: a storage and encoding-spike memory model, the
//! `(τ_strict, τ_lazy)` sweep, boundary verdicts, and the bits-versus-outliers
//! break-even calculator.
//!
//! Memory model, per tensor family `t` at transformer layer `ℓ` with chosen
//! width `N`:
//!
//! ```text
//! stored(t, ℓ)    = per_layer · effective_bits(N, outliers) · rows · cols / 8
//! transient(t, ℓ) = per_layer · (4 · rows · cols                 source in binary32
//!                               + Σ_{n ∈ candidates, n ≤ N} codebook_bytes(n)
//!                               + packed_index_bytes(N))
//! steady          = reserved + Σ stored
//! spike           = steady + max transient
//! ```
//!
//! Candidates are tried in ascending order, so the largest one evaluated for a
//! layer is its chosen width.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autoselect::{decide, dispatch_tau, evaluate_candidates, CandidateScore, LayerClass, Mode, QualityPolicy};
use crate::container::effective_bits_for;
use crate::error::{Error, Result};
use crate::library::group_count;
use crate::outlier::extract_outliers;
use crate::packing::PackingScheme;
use crate::synth;
use crate::tensor::WeightMatrix;

pub const GIB: u64 = 1 << 30;

/// One family of identically shaped matrices, e.g. the routed gate/up
/// projections of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFamily {
    pub name: String,
    pub class: LayerClass,
    pub rows: usize,
    pub cols: usize,
    /// Transformer layers containing this family.
    pub layers: usize,
    /// Matrices per layer (the expert count for routed experts).
    #[serde(default = "one")]
    pub per_layer: usize,
    /// Synthetic distribution used for representative matrices.
    pub profile: String,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareEnvelope {
    pub bytes_per_device: u64,
    pub device_count: u32,
}

impl HardwareEnvelope {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_per_device.saturating_mul(self.device_count as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub tensors: Vec<TensorFamily>,
    pub hardware: HardwareEnvelope,
    /// KV-cache, activation and engine buffers across all devices.
    pub reserved_bytes: u64,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        for t in &self.tensors {
            if t.rows == 0 || t.cols == 0 || t.layers == 0 || t.per_layer == 0 {
                return Err(Error::InvalidArgument(format!(
                    "tensor family `{}` has a zero dimension or count",
                    t.name
                )));
            }
        }
        if self.hardware.device_count == 0 || self.hardware.bytes_per_device == 0 {
            return Err(Error::InvalidArgument("hardware envelope must be positive".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> u64 {
        self.tensors
            .iter()
            .map(|t| (t.rows * t.cols * t.layers * t.per_layer) as u64)
            .sum()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// A profile shaped like a 397B-parameter hybrid-attention MoE: 60 layers
/// (45 linear-attention, 15 full-attention), hidden size 4096, 512 routed
/// experts of intermediate size 1024 plus one shared expert per layer, on two
/// 96 GiB devices with 8 GiB KV-cache and 10 GiB activations reserved per
/// device.
pub fn synthetic_397b_profile() -> ModelProfile {
    let h = 4096;
    let fam = |name: &str, class, rows, cols, layers, per_layer, profile: &str| TensorFamily {
        name: name.into(),
        class,
        rows,
        cols,
        layers,
        per_layer,
        profile: profile.into(),
    };
    use LayerClass::*;
    ModelProfile {
        name: "synthetic-397b-a17b".into(),
        tensors: vec![
            fam("linear_attn_in", LinearAttention, 12288, h, 45, 1, "qwen_attn_v"),
            fam("linear_attn_out", LinearAttention, h, 4096, 45, 1, "qwen_attn_v"),
            fam("attn_q", SelfAttention, 8192, h, 15, 1, "qwen_attn_k"),
            fam("attn_kv", SelfAttention, 1024, h, 15, 1, "qwen_attn_k"),
            fam("attn_o", SelfAttention, h, 4096, 15, 1, "qwen_attn_v"),
            fam("shared_gate_up", SharedExpert, 2048, h, 60, 1, "qwen_shared_gate_up"),
            fam("shared_down", SharedExpert, h, 1024, 60, 1, "qwen_shared_gate_up"),
            fam("routed_gate_up", RoutedExpert, 2048, h, 60, 512, "qwen_routed_down"),
            fam("routed_down", RoutedExpert, h, 1024, 60, 512, "qwen_routed_down"),
            fam("lm_head", LmHead, 248_320, h, 1, 1, "qwen_dense_mlp"),
        ],
        hardware: HardwareEnvelope {
            bytes_per_device: 96 * GIB,
            device_count: 2,
        },
        reserved_bytes: 2 * (8 + 10) * GIB,
    }
}

/// Width and outlier density chosen for one family at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerPlan {
    pub tensor: usize,
    pub layer: usize,
    pub n_bits: u8,
    pub outlier_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub steady_bytes: u64,
    pub spike_bytes: u64,
    /// Stored bytes excluding the reservation.
    pub weight_bytes: u64,
}

fn codebook_bytes(mode: Mode, n_bits: u8, t: &TensorFamily, policy: &QualityPolicy) -> f64 {
    let entries = (1usize << n_bits) as f64;
    match mode {
        Mode::V2 => t.rows as f64 * entries * 2.0,
        Mode::V2a => {
            let groups = group_count(t.rows, t.cols, policy.group_size, policy.group_orientation) as f64;
            policy.library_size as f64 * entries * 2.0 + groups * 5.0
        }
    }
}

/// Steady and spike bytes for a full per-layer assignment.
pub fn estimate_memory(
    profile: &ModelProfile,
    plan: &[LayerPlan],
    mode: Mode,
    policy: &QualityPolicy,
) -> Result<MemoryEstimate> {
    profile.validate()?;
    let mut seen: Vec<Vec<bool>> = profile.tensors.iter().map(|t| vec![false; t.layers]).collect();
    let mut weight_bits = 0.0f64;
    let mut transient = 0.0f64;
    for p in plan {
        let t = profile
            .tensors
            .get(p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("plan names tensor family {}", p.tensor)))?;
        let slot = seen[p.tensor]
            .get_mut(p.layer)
            .ok_or_else(|| Error::InvalidArgument(format!("plan names layer {} of `{}`", p.layer, t.name)))?;
        if std::mem::replace(slot, true) {
            return Err(Error::InvalidArgument(format!(
                "layer {} of `{}` planned twice",
                p.layer, t.name
            )));
        }
        let numel = t.rows * t.cols;
        let outliers = (p.outlier_fraction * numel as f64).round() as usize;
        let bits = effective_bits_for(
            mode,
            p.n_bits,
            t.rows,
            t.cols,
            policy.group_size,
            policy.library_size,
            outliers,
        )?;
        weight_bits += bits.total * numel as f64 * t.per_layer as f64;

        let scheme = PackingScheme::for_bits(p.n_bits)?;
        let evaluated: f64 = policy
            .candidates(mode)
            .iter()
            .filter(|&&n| n <= p.n_bits)
            .map(|&n| codebook_bytes(mode, n, t, policy))
            .sum();
        let layer_transient = t.per_layer as f64
            * (4.0 * numel as f64 + evaluated + (scheme.word_count(numel) * scheme.word_bytes()) as f64);
        transient = transient.max(layer_transient);
    }
    if let Some((t, _)) = profile.tensors.iter().zip(&seen).find(|(_, s)| s.iter().any(|&v| !v)) {
        return Err(Error::InvalidArgument(format!(
            "plan does not cover every layer of `{}`",
            t.name
        )));
    }
    let weight_bytes = (weight_bits / 8.0).ceil() as u64;
    let steady = profile.reserved_bytes + weight_bytes;
    Ok(MemoryEstimate {
        steady_bytes: steady,
        spike_bytes: steady + transient.ceil() as u64,
        weight_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub tau_strict: f64,
    pub tau_lazy: f64,
}

/// The G / H1 / H1.5 / H1.7 / H operating points.
pub fn preset_grid() -> Vec<GridPoint> {
    [
        ("G", 0.92, 0.80),
        ("H1", 0.96, 0.92),
        ("H1.5", 0.96, 0.93),
        ("H1.7", 0.96, 0.935),
        ("H", 0.96, 0.94),
    ]
    .into_iter()
    .map(|(label, tau_strict, tau_lazy)| GridPoint {
        label: label.into(),
        tau_strict,
        tau_lazy,
    })
    .collect()
}

/// Generation-quality verdict observed outside this tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalVerdict {
    Pass,
    Garbage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Fits,
    Oom,
    ExternalGarbage,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Fits => "fits",
            Verdict::Oom => "oom",
            Verdict::ExternalGarbage => "external-garbage",
        })
    }
}

pub fn classify(spike_bytes: u64, envelope: &HardwareEnvelope, external: Option<ExternalVerdict>) -> Verdict {
    if spike_bytes > envelope.total_bytes() {
        Verdict::Oom
    } else if external == Some(ExternalVerdict::Garbage) {
        Verdict::ExternalGarbage
    } else {
        Verdict::Fits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub mode: Mode,
    /// Representative matrices evaluated per tensor family.
    pub samples_per_class: usize,
    /// Row cap for representative matrices; columns are kept.
    pub sample_rows: usize,
    pub seed: u64,
    pub policy: QualityPolicy,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mode: Mode::V2,
            samples_per_class: 4,
            sample_rows: 64,
            seed: 0,
            policy: QualityPolicy::default(),
        }
    }
}

/// Cached candidate scores of one representative matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScores {
    pub tensor: usize,
    pub sample: usize,
    pub scores: Vec<CandidateScore>,
    pub outlier_fraction: f64,
}

fn representative(t: &TensorFamily, cfg: &SweepConfig, seed: u64) -> Result<WeightMatrix> {
    let profile = synth::profile(&t.profile)?;
    let rows = t.rows.min(cfg.sample_rows.max(1));
    if t.class == LayerClass::RoutedExpert {
        let experts = cfg.policy.moe_sample_size.min(t.per_layer);
        let rows = (rows / experts).max(1);
        let parts = synth::generate_population(&profile, experts, rows, t.cols, seed)?;
        let refs: Vec<&WeightMatrix> = parts.iter().collect();
        WeightMatrix::concat_rows(&refs)
    } else {
        synth::generate(&profile, rows, t.cols, seed)
    }
}

/// Score every candidate width on every representative matrix. The result
/// is independent of the thresholds, so one scoring serves a whole grid.
pub fn score_samples(profile: &ModelProfile, cfg: &SweepConfig) -> Result<Vec<SampleScores>> {
    profile.validate()?;
    cfg.policy.validate()?;
    if cfg.samples_per_class == 0 {
        return Err(Error::InvalidArgument(
            "at least one sample per class is required".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..profile.tensors.len())
        .flat_map(|t| (0..cfg.samples_per_class).map(move |s| (t, s)))
        .collect();
    crate::par::map_indexed(jobs.len(), |j| {
        let (ti, s) = jobs[j];
        let t = &profile.tensors[ti];
        let seed = cfg.seed ^ ((ti as u64) << 32 | s as u64);
        let w = representative(t, cfg, seed)?;
        let (_, outliers) = extract_outliers(&w, cfg.policy.k, cfg.policy.cap_fraction);
        Ok(SampleScores {
            tensor: ti,
            sample: s,
            scores: evaluate_candidates(&w, t.class, &cfg.policy, cfg.mode)?,
            outlier_fraction: outliers.len() as f64 / w.numel() as f64,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub label: String,
    pub tau_strict: f64,
    pub tau_lazy: f64,
    /// Class name to (bit width to matrix count).
    pub histogram: BTreeMap<String, BTreeMap<u8, u64>>,
    /// Share of parameters stored at 4 bits or more.
    pub xfp4_fraction: f64,
    pub steady_bytes: u64,
    pub spike_bytes: u64,
    /// Stored weight bits per parameter, outliers included.
    pub effective_bits: f64,
    pub verdict: Verdict,
}

/// Per-layer plan at one grid point: layer `ℓ` of a family takes the
/// decision of sample `ℓ mod samples`.
pub fn plan_for_point(
    profile: &ModelProfile,
    samples: &[SampleScores],
    point: &GridPoint,
    cfg: &SweepConfig,
) -> Result<Vec<LayerPlan>> {
    let policy = QualityPolicy {
        tau_strict: point.tau_strict,
        tau_lazy: point.tau_lazy,
        ..cfg.policy.clone()
    };
    let mut plan = Vec::new();
    for (ti, t) in profile.tensors.iter().enumerate() {
        let mine: Vec<&SampleScores> = samples.iter().filter(|s| s.tensor == ti).collect();
        if mine.is_empty() {
            return Err(Error::InvalidArgument(format!("no samples scored for `{}`", t.name)));
        }
        let tau = dispatch_tau(t.class, &policy);
        for layer in 0..t.layers {
            let s = mine[layer % mine.len()];
            plan.push(LayerPlan {
                tensor: ti,
                layer,
                n_bits: decide(&s.scores, tau).0,
                outlier_fraction: s.outlier_fraction,
            });
        }
    }
    Ok(plan)
}

fn check_grid(grid: &[GridPoint]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if let Some(p) = grid
        .iter()
        .find(|p| p.tau_lazy.is_nan() || p.tau_strict.is_nan() || p.tau_lazy > p.tau_strict)
    {
        return Err(Error::InvalidPolicy(format!(
            "point {} has tau_lazy {} above tau_strict {}",
            p.label, p.tau_lazy, p.tau_strict
        )));
    }
    Ok(())
}

pub fn evaluate_point(
    profile: &ModelProfile,
    samples: &[SampleScores],
    point: &GridPoint,
    cfg: &SweepConfig,
    external: Option<ExternalVerdict>,
) -> Result<OperatingPoint> {
    let plan = plan_for_point(profile, samples, point, cfg)?;
    let mem = estimate_memory(profile, &plan, cfg.mode, &cfg.policy)?;
    let mut histogram: BTreeMap<String, BTreeMap<u8, u64>> = BTreeMap::new();
    let (mut wide, mut total) = (0u64, 0u64);
    for p in &plan {
        let t = &profile.tensors[p.tensor];
        *histogram
            .entry(t.class.name().to_string())
            .or_default()
            .entry(p.n_bits)
            .or_default() += t.per_layer as u64;
        let params = (t.rows * t.cols * t.per_layer) as u64;
        total += params;
        if p.n_bits >= 4 {
            wide += params;
        }
    }
    let fraction = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
    Ok(OperatingPoint {
        label: point.label.clone(),
        tau_strict: point.tau_strict,
        tau_lazy: point.tau_lazy,
        histogram,
        xfp4_fraction: fraction(wide as f64, total),
        steady_bytes: mem.steady_bytes,
        spike_bytes: mem.spike_bytes,
        effective_bits: fraction(mem.weight_bytes as f64 * 8.0, total),
        verdict: classify(mem.spike_bytes, &profile.hardware, external),
    })
}

/// Evaluate a grid from one shared scoring pass. Points come back in grid
/// order; `verdicts` maps point labels to externally observed outcomes.
pub fn sweep(
    profile: &ModelProfile,
    grid: &[GridPoint],
    cfg: &SweepConfig,
    verdicts: &BTreeMap<String, ExternalVerdict>,
) -> Result<Vec<OperatingPoint>> {
    check_grid(grid)?;
    let samples = score_samples(profile, cfg)?;
    sweep_scored(profile, grid, cfg, &samples, verdicts)
}

pub fn sweep_scored(
    profile: &ModelProfile,
    grid: &[GridPoint],
    cfg: &SweepConfig,
    samples: &[SampleScores],
    verdicts: &BTreeMap<String, ExternalVerdict>,
) -> Result<Vec<OperatingPoint>> {
    check_grid(grid)?;
    grid.iter()
        .map(|p| evaluate_point(profile, samples, p, cfg, verdicts.get(&p.label).copied()))
        .collect()
}

/// Per-CTA opt-in shared-memory limits (KiB) by GPU tier, for context in
/// sweep reports.
pub const SMEM_LIMITS_KB: [(&str, &str, u32); 4] = [
    ("SM90", "H100, H200", 228),
    ("SM100", "B100, B200", 228),
    ("SM120", "RTX PRO 6000", 99),
    ("SM121", "DGX Spark (GB10)", 99),
];

fn gib(bytes: u64) -> f64 {
    bytes as f64 / GIB as f64
}

/// Plain-text operating-point table; memory columns are per device.
pub fn render_table(profile: &ModelProfile, points: &[OperatingPoint]) -> String {
    let devices = profile.hardware.device_count.max(1) as u64;
    let mut out = format!(
        "{:<6} {:>8} {:>8} {:>7} {:>12} {:>12} {:>9}  {}\n",
        "Var.", "t_strict", "t_lazy", "xfp4%", "Steady GiB", "Spike GiB", "Eff bits", "Verdict"
    );
    for p in points {
        out += &format!(
            "{:<6} {:>8.3} {:>8.3} {:>7.1} {:>12.1} {:>12.1} {:>9.3}  {}\n",
            p.label,
            p.tau_strict,
            p.tau_lazy,
            100.0 * p.xfp4_fraction,
            gib(p.steady_bytes / devices),
            gib(p.spike_bytes / devices),
            p.effective_bits,
            p.verdict
        );
    }
    out += &format!(
        "envelope: {} x {:.1} GiB, reserved {:.1} GiB total\n",
        profile.hardware.device_count,
        gib(profile.hardware.bytes_per_device),
        gib(profile.reserved_bytes)
    );
    out += "\nper-CTA opt-in shared memory (lane geometry uses warp size 32):\n";
    for (tier, hw, kb) in SMEM_LIMITS_KB {
        out += &format!("  {tier:<6} {hw:<18} {kb:>4} KB\n");
    }
    out
}

/// Outlier density `y` at which storing a layer at `bits_low` with outliers
/// costs as much as `bits_high` with `cap_high` outliers:
/// `bits_low/8 + bytes·y = bits_high/8 + cap_high·bytes`.
pub fn break_even_outlier_fraction(
    bits_low: f64,
    bits_high: f64,
    cap_high: f64,
    bytes_per_outlier: f64,
) -> Result<f64> {
    if bits_high.is_nan() || bits_low.is_nan() || bits_high <= bits_low {
        return Err(Error::InvalidArgument(format!(
            "bits_high {bits_high} must exceed bits_low {bits_low}"
        )));
    }
    if bytes_per_outlier.is_nan() || bytes_per_outlier <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bytes per outlier must be positive, got {bytes_per_outlier}"
        )));
    }
    Ok((bits_high / 8.0 - bits_low / 8.0 + cap_high * bytes_per_outlier) / bytes_per_outlier)
}
