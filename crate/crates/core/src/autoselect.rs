//! Quality-targeted bit-width selection.
//!
//! Candidate bit widths are tried in ascending order; the first whose median
//! per-channel cosine (reconstruction with outlier residuals vs. the original
//! matrix) reaches the layer's quality floor wins. Routed MoE experts are held
//! to the lazy floor, everything else to the strict floor.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::container::Payload;
use crate::error::{Error, Result};
use crate::library::{self, GroupOrientation, LibFitReport};
use crate::lloyd::{self, IndexMatrix, DEFAULT_LLOYD_ITERS, DEFAULT_MOE_LLOYD_ITERS};
use crate::outlier::{
    apply_outliers, extract_outliers, finalize_residuals, raw_values, BulkMatrix, OutlierSet, ResidualConvention,
    DEFAULT_CAP_FRACTION, DEFAULT_K,
};
use crate::packing::v2a_lane_geometry;
use crate::tensor::{median, per_channel_cosine, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One codebook per output channel.
    V2,
    /// Shared per-layer codebook library with per-group affine assignment.
    V2a,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::V2 => "v2",
            Mode::V2a => "v2a",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v2" => Ok(Mode::V2),
            "v2a" => Ok(Mode::V2a),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    SelfAttention,
    LinearAttention,
    SharedExpert,
    RoutedExpert,
    LmHead,
}

impl LayerClass {
    pub const ALL: [LayerClass; 5] = [
        LayerClass::SelfAttention,
        LayerClass::LinearAttention,
        LayerClass::SharedExpert,
        LayerClass::RoutedExpert,
        LayerClass::LmHead,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::InvalidLayer(format!("unknown layer class tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerClass::SelfAttention => "self_attention",
            LayerClass::LinearAttention => "linear_attention",
            LayerClass::SharedExpert => "shared_expert",
            LayerClass::RoutedExpert => "routed_expert",
            LayerClass::LmHead => "lm_head",
        }
    }
}

impl std::str::FromStr for LayerClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer class `{s}`")))
    }
}

/// Which experts of an MoE block feed the bit-width decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertSampling {
    /// The lowest expert indices.
    #[default]
    First,
    /// A seeded uniform draw without replacement.
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityPolicy {
    pub tau_strict: f64,
    pub tau_lazy: f64,
    pub k: f64,
    pub cap_fraction: f64,
    pub candidates_v2: Vec<u8>,
    pub candidates_v2a: Vec<u8>,
    pub group_size: usize,
    pub library_size: usize,
    pub lloyd_iters: usize,
    pub moe_lloyd_iters: usize,
    pub moe_sample_size: usize,
    pub expert_sampling: ExpertSampling,
    pub group_orientation: GroupOrientation,
    pub residual_convention: ResidualConvention,
}

impl Default for QualityPolicy {
    fn default() -> Self {
        Self {
            tau_strict: 0.96,
            tau_lazy: 0.93,
            k: DEFAULT_K,
            cap_fraction: DEFAULT_CAP_FRACTION,
            candidates_v2: vec![2, 3, 4],
            candidates_v2a: vec![2, 4],
            group_size: library::DEFAULT_GROUP_SIZE,
            library_size: library::DEFAULT_LIBRARY_SIZE,
            lloyd_iters: DEFAULT_LLOYD_ITERS,
            moe_lloyd_iters: DEFAULT_MOE_LLOYD_ITERS,
            moe_sample_size: 4,
            expert_sampling: ExpertSampling::First,
            group_orientation: GroupOrientation::Row,
            residual_convention: ResidualConvention::Add,
        }
    }
}

impl QualityPolicy {
    pub fn with_thresholds(tau_strict: f64, tau_lazy: f64) -> Self {
        Self {
            tau_strict,
            tau_lazy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPolicy(msg));
        if !self.tau_strict.is_finite() || !self.tau_lazy.is_finite() {
            return bad("thresholds must be finite".into());
        }
        if self.tau_lazy > self.tau_strict {
            return bad(format!(
                "tau_lazy {} exceeds tau_strict {}",
                self.tau_lazy, self.tau_strict
            ));
        }
        if self.k.is_nan() || self.k <= 0.0 {
            return bad(format!("k must be positive, got {}", self.k));
        }
        if !(0.0..=1.0).contains(&self.cap_fraction) {
            return bad(format!("cap fraction {} outside [0, 1]", self.cap_fraction));
        }
        for (name, set, allowed) in [
            ("v2", &self.candidates_v2, &[2u8, 3, 4, 5, 6][..]),
            ("v2a", &self.candidates_v2a, &[2u8, 4][..]),
        ] {
            if set.is_empty() {
                return bad(format!("{name} candidate set is empty"));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} candidates must be strictly ascending"));
            }
            if let Some(n) = set.iter().find(|n| !allowed.contains(n)) {
                return bad(format!("N={n} is not a {name} bit width"));
            }
        }
        if self.group_size == 0 {
            return bad("group size must be positive".into());
        }
        for &n in &self.candidates_v2a {
            if !v2a_lane_geometry(n, self.group_size)?.is_admissible() {
                return bad(format!(
                    "group size {} is not lane-admissible for V2a at N={n}",
                    self.group_size
                ));
            }
        }
        if !(1..=256).contains(&self.library_size) {
            return bad(format!("library size {} outside 1..=256", self.library_size));
        }
        if self.moe_sample_size == 0 {
            return bad("MoE sample size must be positive".into());
        }
        Ok(())
    }

    pub fn candidates(&self, mode: Mode) -> &[u8] {
        match mode {
            Mode::V2 => &self.candidates_v2,
            Mode::V2a => &self.candidates_v2a,
        }
    }
}

pub fn dispatch_tau(class: LayerClass, policy: &QualityPolicy) -> f64 {
    match class {
        LayerClass::RoutedExpert => policy.tau_lazy,
        _ => policy.tau_strict,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub n_bits: u8,
    pub median_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoSelectReport {
    pub mode: Mode,
    pub class: LayerClass,
    /// Candidates evaluated, in ascending order, up to the chosen one.
    pub candidates: Vec<CandidateScore>,
    pub chosen_n: u8,
    pub active_tau: f64,
    pub fallback_used: bool,
    pub outlier_count: usize,
    /// Expert ids that fed an MoE decision; empty for dense layers.
    pub sampled_experts: Vec<usize>,
}

impl AutoSelectReport {
    pub fn median_cos_for(&self, n_bits: u8) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.n_bits == n_bits)
            .map(|c| c.median_cos)
    }
}

/// A fitted candidate: codebook payload, indices, finalized outliers and both
/// reconstructions.
#[derive(Debug, Clone)]
pub struct CandidateFit {
    pub n_bits: u8,
    pub payload: Payload,
    pub indices: IndexMatrix,
    pub outliers: OutlierSet,
    pub bulk_recon: WeightMatrix,
    pub full_recon: WeightMatrix,
    pub median_cos: f64,
    pub libfit: Option<LibFitReport>,
}

/// Fit one candidate bit width on an already-cleaned bulk.
pub fn fit_candidate(
    w: &WeightMatrix,
    bulk: &BulkMatrix,
    raw_outliers: &OutlierSet,
    n_bits: u8,
    mode: Mode,
    class: LayerClass,
    policy: &QualityPolicy,
) -> Result<CandidateFit> {
    let (payload, indices, bulk_recon, libfit) = match mode {
        Mode::V2 => {
            let cbs = lloyd::fit_channel_codebooks(bulk, n_bits, policy.lloyd_iters);
            let indices = lloyd::assign_indices(bulk, &cbs)?;
            let recon = lloyd::reconstruct(&indices, &cbs)?;
            (Payload::V2(cbs), indices, recon, None)
        }
        Mode::V2a => {
            let cbs = lloyd::fit_channel_codebooks(bulk, n_bits, policy.lloyd_iters);
            let iters = if class == LayerClass::RoutedExpert {
                policy.moe_lloyd_iters
            } else {
                policy.lloyd_iters
            };
            let (lib, report) = library::libfit(&cbs, policy.library_size, iters)?;
            let (assignments, indices) =
                library::assign_groups(bulk, &lib, policy.group_size, policy.group_orientation)?;
            let recon = library::reconstruct(
                &indices,
                &lib,
                &assignments,
                policy.group_size,
                policy.group_orientation,
            )?;
            (
                Payload::V2a {
                    library: lib,
                    assignments,
                },
                indices,
                recon,
                Some(report),
            )
        }
    };
    let outliers = match policy.residual_convention {
        ResidualConvention::Add => finalize_residuals(raw_outliers, w, &bulk_recon)?,
        ResidualConvention::Overwrite => raw_values(raw_outliers, w)?,
    };
    let mut full = bulk_recon.data().to_vec();
    apply_outliers(&mut full, w.rows(), w.cols(), &outliers, policy.residual_convention)?;
    let full_recon = WeightMatrix::new(w.rows(), w.cols(), full)?;
    let median_cos = median(&per_channel_cosine(w, &full_recon)?);
    Ok(CandidateFit {
        n_bits,
        payload,
        indices,
        outliers,
        bulk_recon,
        full_recon,
        median_cos,
        libfit,
    })
}

/// The selection loop, also returning the winning fit so encoding does not
/// refit it.
pub(crate) fn select_and_fit(
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
) -> Result<(AutoSelectReport, CandidateFit)> {
    policy.validate()?;
    let (bulk, raw) = extract_outliers(w, policy.k, policy.cap_fraction);
    let tau = dispatch_tau(class, policy);
    let mut scores = Vec::new();
    let mut last = None;
    for &n in policy.candidates(mode) {
        let fit = fit_candidate(w, &bulk, &raw, n, mode, class, policy)?;
        scores.push(CandidateScore {
            n_bits: n,
            median_cos: fit.median_cos,
        });
        let passed = fit.median_cos >= tau;
        last = Some(fit);
        if passed {
            break;
        }
    }
    let fit = last.expect("candidate set validated non-empty");
    let max_n = *policy.candidates(mode).last().unwrap();
    let fallback_used = fit.median_cos < tau;
    let report = AutoSelectReport {
        mode,
        class,
        candidates: scores,
        chosen_n: if fallback_used { max_n } else { fit.n_bits },
        active_tau: tau,
        fallback_used,
        outlier_count: raw.len(),
        sampled_experts: Vec::new(),
    };
    Ok((report, fit))
}

pub fn auto_select(
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
) -> Result<AutoSelectReport> {
    Ok(select_and_fit(w, class, policy, mode)?.0)
}

/// Median cosine for every candidate, without the early exit. Combined with
/// [`decide`] this gives the same answer as [`auto_select`] for any floor,
/// which lets threshold sweeps reuse one set of fits.
pub fn evaluate_candidates(
    w: &WeightMatrix,
    class: LayerClass,
    policy: &QualityPolicy,
    mode: Mode,
) -> Result<Vec<CandidateScore>> {
    policy.validate()?;
    let (bulk, raw) = extract_outliers(w, policy.k, policy.cap_fraction);
    policy
        .candidates(mode)
        .iter()
        .map(|&n| {
            let fit = fit_candidate(w, &bulk, &raw, n, mode, class, policy)?;
            Ok(CandidateScore {
                n_bits: n,
                median_cos: fit.median_cos,
            })
        })
        .collect()
}

/// First ascending candidate meeting `tau`; the largest one otherwise.
/// Returns `(n_bits, fallback_used)`.
pub fn decide(scores: &[CandidateScore], tau: f64) -> (u8, bool) {
    match scores.iter().find(|s| s.median_cos >= tau) {
        Some(s) => (s.n_bits, false),
        None => (scores.last().expect("no candidates").n_bits, true),
    }
}

/// Expert ids used for the MoE decision.
pub fn sample_expert_ids(expert_count: usize, policy: &QualityPolicy) -> Vec<usize> {
    let take = policy.moe_sample_size.min(expert_count);
    match policy.expert_sampling {
        ExpertSampling::First => (0..take).collect(),
        ExpertSampling::Seeded(seed) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut ids = sample(&mut rng, expert_count, take).into_vec();
            ids.sort_unstable();
            ids
        }
    }
}

fn concat_experts(experts: &[WeightMatrix], ids: &[usize]) -> Result<WeightMatrix> {
    let first = experts
        .first()
        .ok_or_else(|| Error::InvalidArgument("MoE block has no experts".into()))?;
    if let Some(bad) = experts.iter().find(|e| e.shape() != first.shape()) {
        return Err(crate::tensor::shape_mismatch(first, bad));
    }
    let parts: Vec<&WeightMatrix> = ids.iter().map(|&i| &experts[i]).collect();
    WeightMatrix::concat_rows(&parts)
}

/// Decide one bit width for a whole MoE block from a sample of its experts,
/// concatenated along the channel axis.
pub fn moe_sample_select(experts: &[WeightMatrix], policy: &QualityPolicy, mode: Mode) -> Result<AutoSelectReport> {
    policy.validate()?;
    let ids = sample_expert_ids(experts.len(), policy);
    let stacked = concat_experts(experts, &ids)?;
    let mut report = auto_select(&stacked, LayerClass::RoutedExpert, policy, mode)?;
    report.sampled_experts = ids;
    Ok(report)
}

/// Reference decision on the whole expert population.
pub fn moe_full_select(experts: &[WeightMatrix], policy: &QualityPolicy, mode: Mode) -> Result<AutoSelectReport> {
    policy.validate()?;
    let ids: Vec<usize> = (0..experts.len()).collect();
    let stacked = concat_experts(experts, &ids)?;
    let mut report = auto_select(&stacked, LayerClass::RoutedExpert, policy, mode)?;
    report.sampled_experts = ids;
    Ok(report)
}
