use proptest::prelude::*;

use xfp_core::autoselect::{auto_select, LayerClass, Mode, QualityPolicy};
use xfp_core::container::{decode_layer, encode_layer_at, encode_layer_with_report, QuantizedModel};
use xfp_core::fp16::Half;
use xfp_core::hprocess::{break_even_outlier_fraction, classify, HardwareEnvelope, Verdict};
use xfp_core::library::{assign_groups, libfit, reconstruct, single_entry_sse, GroupOrientation};
use xfp_core::lloyd::fit_channel_codebooks;
use xfp_core::outlier::extract_outliers;
use xfp_core::synth;
use xfp_core::tensor::{median, mse, per_channel_cosine, WeightMatrix};

const PROFILES: [&str; 5] = [
    "attn_kva",
    "routed",
    "glm_shared_gate_up",
    "qwen_attn_k",
    "qwen_dense_mlp",
];

fn synth_matrix(profile: usize, rows: usize, cols: usize, seed: u64) -> WeightMatrix {
    let p = synth::profile(PROFILES[profile % PROFILES.len()]).unwrap();
    synth::generate(&p, rows, cols, seed).unwrap()
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn chosen_width_monotone_in_tau(profile in 0usize..5, seed in 0u64..1000, a in 0.9f64..1.0, b in 0.9f64..1.0, v2a in any::<bool>()) {
        let mode = if v2a { Mode::V2a } else { Mode::V2 };
        let w = synth_matrix(profile, 24, 128, seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = auto_select(&w, LayerClass::SelfAttention, &QualityPolicy::with_thresholds(lo, lo), mode).unwrap();
        let r_hi = auto_select(&w, LayerClass::SelfAttention, &QualityPolicy::with_thresholds(hi, hi), mode).unwrap();
        prop_assert!(r_lo.chosen_n <= r_hi.chosen_n);
    }

    #[test]
    fn routed_never_wider_than_strict(profile in 0usize..5, seed in 0u64..1000, strict in 0.93f64..0.99, gap in 0.001f64..0.05, v2a in any::<bool>()) {
        let mode = if v2a { Mode::V2a } else { Mode::V2 };
        let w = synth_matrix(profile, 24, 128, seed);
        let policy = QualityPolicy::with_thresholds(strict, strict - gap);
        let routed = auto_select(&w, LayerClass::RoutedExpert, &policy, mode).unwrap();
        let dense = auto_select(&w, LayerClass::SharedExpert, &policy, mode).unwrap();
        prop_assert!(routed.chosen_n <= dense.chosen_n);
        prop_assert_eq!(routed.active_tau, strict - gap);
        prop_assert_eq!(dense.active_tau, strict);
    }

    #[test]
    fn v2a_reports_only_even_widths(profile in 0usize..5, seed in 0u64..1000, tau in 0.0f64..1.2) {
        let w = synth_matrix(profile, 24, 128, seed);
        let r = auto_select(&w, LayerClass::SelfAttention, &QualityPolicy::with_thresholds(tau, tau), Mode::V2a).unwrap();
        prop_assert!(r.candidates.iter().all(|c| c.n_bits == 2 || c.n_bits == 4));
        prop_assert!(r.chosen_n == 2 || r.chosen_n == 4);
    }

    #[test]
    fn encoding_is_deterministic(profile in 0usize..5, seed in 0u64..1000, v2a in any::<bool>()) {
        let mode = if v2a { Mode::V2a } else { Mode::V2 };
        let w = synth_matrix(profile, 24, 128, seed);
        let policy = QualityPolicy::default();
        let (a, ra) = encode_layer_with_report("x", &w, LayerClass::SelfAttention, &policy, mode).unwrap();
        let (b, rb) = encode_layer_with_report("x", &w, LayerClass::SelfAttention, &policy, mode).unwrap();
        prop_assert_eq!(ra, rb);
        let bytes_a = QuantizedModel::new(vec![a]).to_bytes().unwrap();
        let bytes_b = QuantizedModel::new(vec![b]).to_bytes().unwrap();
        prop_assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn decoded_layer_meets_its_floor(profile in 0usize..5, seed in 0u64..1000, v2a in any::<bool>(), routed in any::<bool>()) {
        let mode = if v2a { Mode::V2a } else { Mode::V2 };
        let class = if routed { LayerClass::RoutedExpert } else { LayerClass::SelfAttention };
        let w = synth_matrix(profile, 24, 128, seed);
        let (layer, report) = encode_layer_with_report("x", &w, class, &QualityPolicy::default(), mode).unwrap();
        let med = median(&per_channel_cosine(&w, &decode_layer(&layer).unwrap()).unwrap());
        if !report.fallback_used {
            prop_assert!(med >= report.active_tau, "{} < {}", med, report.active_tau);
        }
    }

    #[test]
    fn serialization_roundtrip_any_width(seed in 0u64..1000, pick in 0usize..7, col in any::<bool>(), overwrite in any::<bool>()) {
        let widths = [(Mode::V2, 2u8), (Mode::V2, 3), (Mode::V2, 4), (Mode::V2, 5), (Mode::V2, 6), (Mode::V2a, 2), (Mode::V2a, 4)];
        let (mode, n) = widths[pick];
        let policy = QualityPolicy {
            group_orientation: if col { GroupOrientation::Column } else { GroupOrientation::Row },
            residual_convention: if overwrite {
                xfp_core::outlier::ResidualConvention::Overwrite
            } else {
                xfp_core::outlier::ResidualConvention::Add
            },
            ..QualityPolicy::default()
        };
        let w = synth_matrix(seed as usize, 32, 160, seed);
        let model = QuantizedModel::new(vec![encode_layer_at("p", &w, LayerClass::LmHead, &policy, mode, n).unwrap()]);
        let bytes = model.to_bytes().unwrap();
        let back = QuantizedModel::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn raising_k_never_adds_outliers(seed in 0u64..1000, profile in 0usize..5, k1 in 1.0f64..8.0, dk in 0.0f64..4.0, cap in 0.0f64..0.05) {
        let w = synth_matrix(profile, 32, 128, seed);
        let (_, a) = extract_outliers(&w, k1, cap);
        let (_, b) = extract_outliers(&w, k1 + dk, cap);
        prop_assert!(b.len() <= a.len());
    }

    #[test]
    fn extraction_idempotent_on_gaussian_bulk(seed in 0u64..1000) {
        let p = synth::profile("gaussian").unwrap();
        let w = synth::generate(&p, 32, 128, seed).unwrap();
        let (bulk, _) = extract_outliers(&w, 4.0, 0.02);
        let x: Vec<f64> = bulk.data().iter().map(|&v| v as f64).collect();
        let mu = x.iter().sum::<f64>() / x.len() as f64;
        let sigma = (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64).sqrt();
        let max_dev = x.iter().map(|v| (v - mu).abs()).fold(0.0, f64::max);
        if 4.0 * sigma >= max_dev {
            let (_, again) = extract_outliers(bulk.matrix(), 4.0, 0.02);
            prop_assert!(again.is_empty());
        }
    }

    #[test]
    fn best_entry_dominates_any_single_entry(seed in 0u64..1000, entry in 0usize..8) {
        let w = synth_matrix(seed as usize, 16, 256, seed);
        let cbs = fit_channel_codebooks(&w, 2, 20);
        let (lib, _) = libfit(&cbs, 8, 20).unwrap();
        let (assignments, indices) = assign_groups(&w, &lib, 128, GroupOrientation::Row).unwrap();
        let recon = reconstruct(&indices, &lib, &assignments, 128, GroupOrientation::Row).unwrap();
        let total = mse(&w, &recon).unwrap() * w.numel() as f64;
        let single = single_entry_sse(&w, &lib, 128, GroupOrientation::Row, entry % lib.len()).unwrap();
        prop_assert!(total <= single * (1.0 + 1e-9) + 1e-9, "{} > {}", total, single);
    }

    #[test]
    fn assignment_is_affine_invariant(seed in 0u64..1000, scale_exp in -3i32..4, shift in -8i32..8) {
        // Dyadic scale and shift keep every arithmetic step exact in f32.
        let base = synth::generate(&synth::profile("qwen_dense_mlp").unwrap(), 1, 128, seed).unwrap();
        let train = synth::generate(&synth::profile("qwen_attn_k").unwrap(), 16, 128, seed + 1).unwrap();
        let cbs = fit_channel_codebooks(&train, 2, 20);
        let (lib, _) = libfit(&cbs, 8, 20).unwrap();
        let s = 2f32.powi(scale_exp);
        let moved = WeightMatrix::new(1, 128, base.data().iter().map(|&v| {
            let q = Half::from_f32_saturating(v).to_f32();
            q * s + shift as f32
        }).collect()).unwrap();
        let original = WeightMatrix::new(1, 128, base.data().iter().map(|&v| Half::from_f32_saturating(v).to_f32()).collect()).unwrap();
        let (a, _) = assign_groups(&original, &lib, 128, GroupOrientation::Row).unwrap();
        let (b, _) = assign_groups(&moved, &lib, 128, GroupOrientation::Row).unwrap();
        prop_assume!(a[0].scale.to_f32() * s < 1000.0);
        prop_assert_eq!(a[0].library_index, b[0].library_index);
    }

    #[test]
    fn oom_iff_spike_exceeds_envelope(spike in 0u64..1_000_000, per in 1u64..200_000, devices in 1u32..8, garbage in any::<bool>()) {
        let env = HardwareEnvelope { bytes_per_device: per, device_count: devices };
        let ext = garbage.then_some(xfp_core::hprocess::ExternalVerdict::Garbage);
        let v = classify(spike, &env, ext);
        prop_assert_eq!(v == Verdict::Oom, spike > per * devices as u64);
    }

    #[test]
    fn break_even_solves_its_equation(low in 1.0f64..8.0, gap in 0.01f64..4.0, cap in 0.0f64..0.1, bytes in 1.0f64..64.0) {
        let high = low + gap;
        let y = break_even_outlier_fraction(low, high, cap, bytes).unwrap();
        prop_assert!((low / 8.0 + bytes * y - (high / 8.0 + cap * bytes)).abs() < 1e-9);
    }

    #[test]
    fn synth_is_deterministic(profile in 0usize..5, seed in any::<u64>()) {
        let a = synth_matrix(profile, 16, 256, seed);
        let b = synth_matrix(profile, 16, 256, seed);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn every_profile_hits_its_tail_over_ten_seeds() {
    for name in synth::profile_names() {
        let p = synth::profile(name).unwrap();
        for seed in 0..10 {
            let m = synth::measure(&synth::generate(&p, 128, 512, seed).unwrap());
            if p.tail_fraction_3sigma == 0.0 {
                assert_eq!(m.tail_fraction_3sigma, 0.0, "{name} seed {seed}");
            } else {
                let rel = m.tail_fraction_3sigma / p.tail_fraction_3sigma - 1.0;
                assert!(rel.abs() <= 0.2, "{name} seed {seed}: {m:?}");
            }
            assert!(m.max_abs_sigma <= p.max_abs_sigma * 1.01, "{name} seed {seed}: {m:?}");
        }
    }
}
