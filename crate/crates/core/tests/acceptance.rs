//! Acceptance suite: one line per criterion, exit status non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use xfp_core::autoselect::{auto_select, moe_full_select, moe_sample_select, LayerClass, Mode, QualityPolicy};
use xfp_core::container::{
    decode_layer, effective_bits, effective_bits_for, encode_layer_at, outlier_effect, QuantizedModel,
};
use xfp_core::error::Error;
use xfp_core::hprocess::{break_even_outlier_fraction, preset_grid, sweep, synthetic_397b_profile, SweepConfig};
use xfp_core::library::{libfit, GroupOrientation};
use xfp_core::lloyd::{fit_channel_codebooks, lloyd_trace, IndexMatrix};
use xfp_core::outlier::{cap_count, ResidualConvention};
use xfp_core::packing::{pack, unpack, v2a_lane_geometry, GeometryVerdict, PackingScheme, SCHEMES};
use xfp_core::synth;
use xfp_core::tensor::{median, WeightMatrix};

const PACKING_TRIALS: usize = 100_000;
const PACKING_BUDGET: Duration = Duration::from_secs(5);
const LLOYD_CHANNELS: usize = 1_000;
const LLOYD_MONOTONE_RTOL: f64 = 1e-6;
const ORACLE_RATIO: f64 = 1.10;
const ORACLE_SHARE: f64 = 0.90;
const DIRECTIONAL_BUDGET: Duration = Duration::from_secs(60);
const ATTN_MSE_RATIO_MIN: f64 = 1.5;
const ROUTED_MSE_RATIO_MAX: f64 = 1.1;
const ROUTED_DCOS_MAX: f64 = 0.001;
const MOE_AGREEMENT_MIN: f64 = 0.95;
const BREAK_EVEN_TARGET: f64 = 0.027;
const BREAK_EVEN_TOL: f64 = 0.0001;
const EFF_BITS_TOL: f64 = 0.005;
const TAIL_REL_TOL: f64 = 0.20;
const PLANTED_SIGMA_RANGE: (f64, f64) = (44.0, 54.0);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

/// Bit-by-bit reference packer.
fn reference_words(indices: &[u8], scheme: PackingScheme) -> Vec<u32> {
    let vpw = scheme.values_per_word;
    let n = scheme.n_bits as usize;
    let mut words = vec![0u32; indices.len().div_ceil(vpw)];
    for (e, &v) in indices.iter().enumerate() {
        for b in 0..n {
            if (v >> b) & 1 == 1 {
                words[e / vpw] |= 1 << ((e % vpw) * n + b);
            }
        }
    }
    words
}

fn c01_packing_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for n in 2..=6u8 {
        let scheme = PackingScheme::for_bits(n).map_err(|e| e.to_string())?;
        for trial in 0..PACKING_TRIALS {
            let rows = rng.random_range(1..=4);
            let cols = rng.random_range(1..=24);
            let idx: Vec<u8> = (0..rows * cols).map(|_| rng.random_range(0..1u32 << n) as u8).collect();
            let m = IndexMatrix::new(rows, cols, idx.clone()).unwrap();
            let packed = pack(&m, n).unwrap();
            ensure!(
                packed.words() == reference_words(&idx, scheme).as_slice(),
                "N={n} trial {trial}: words differ from reference (reserve or padding bits set?)"
            );
            ensure!(unpack(&packed).unwrap() == m, "N={n} trial {trial}: roundtrip mismatch");
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < PACKING_BUDGET, "took {elapsed:?}");
    Ok(format!("5 x {PACKING_TRIALS} matrices bit-exact in {elapsed:.2?}"))
}

fn c02_packing_table() -> Outcome {
    let expected = [
        (2u8, 16usize, 32u32, 0u32),
        (3, 10, 32, 2),
        (4, 8, 32, 0),
        (5, 3, 16, 1),
        (6, 5, 32, 2),
    ];
    for (s, (n, vpw, word, reserve)) in SCHEMES.iter().zip(expected) {
        ensure!(
            (s.n_bits, s.values_per_word, s.word_bits, s.reserve_bits) == (n, vpw, word, reserve),
            "scheme {s:?} differs from ({n}, {vpw}, {word}, {reserve})"
        );
        ensure!(s.used_bits + s.reserve_bits == s.word_bits, "scheme {s:?} bit budget");
    }
    Ok("16/10/8/3/5 values per word, reserves 0/2/0/1/2".into())
}

fn random_channel(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    match rng.random_range(0..3) {
        0 => gaussian(1, len, rng),
        1 => (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        _ => (0..len)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * z * z
            })
            .collect(),
    }
}

fn c03_lloyd_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for c in 0..LLOYD_CHANNELS {
        let len = rng.random_range(8..300);
        let size = 1usize << rng.random_range(1..=4);
        let trace = lloyd_trace(&random_channel(&mut rng, len), size, 20);
        for (r, w) in trace.sse_history.windows(2).enumerate() {
            ensure!(
                w[1] <= w[0] * (1.0 + LLOYD_MONOTONE_RTOL) + 1e-300,
                "channel {c} round {r}: SSE rose {} -> {}",
                w[0],
                w[1]
            );
        }
    }
    Ok(format!("{LLOYD_CHANNELS} channels non-increasing"))
}

/// Optimal two-cluster SSE of scalar data: the best contiguous split of the
/// sorted values.
fn optimal_two_cluster_sse(values: &[f32]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    (1..v.len())
        .map(|k| sse(&v[..k]) + sse(&v[k..]))
        .fold(f64::INFINITY, f64::min)
}

fn c04_lloyd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut within = 0;
    let mut worst: f64 = 1.0;
    for t in 0..LLOYD_CHANNELS {
        let values = random_channel(&mut rng, 8);
        let opt = optimal_two_cluster_sse(&values);
        let got = *lloyd_trace(&values, 2, 20).sse_history.last().unwrap();
        ensure!(
            got >= opt * (1.0 - 1e-12) - 1e-12,
            "trial {t}: Lloyd {got} below optimum {opt}"
        );
        let ratio = if opt == 0.0 {
            if got == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            got / opt
        };
        worst = worst.max(ratio);
        if ratio <= ORACLE_RATIO {
            within += 1;
        }
    }
    let share = within as f64 / LLOYD_CHANNELS as f64;
    ensure!(
        share >= ORACLE_SHARE,
        "only {:.1}% within {ORACLE_RATIO}x",
        100.0 * share
    );
    Ok(format!(
        "{:.1}% within {ORACLE_RATIO}x of optimum, worst {worst:.3}x",
        100.0 * share
    ))
}

fn spiky_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> WeightMatrix {
    let mut data = gaussian(rows, cols, rng);
    let spikes = rng.random_range(1..=4).min(data.len() / 60);
    for _ in 0..spikes {
        let i = rng.random_range(0..data.len());
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        data[i] = sign * rng.random_range(8.0f32..60.0);
    }
    WeightMatrix::new(rows, cols, data).unwrap()
}

const MODE_WIDTHS: [(Mode, u8); 7] = [
    (Mode::V2, 2),
    (Mode::V2, 3),
    (Mode::V2, 4),
    (Mode::V2, 5),
    (Mode::V2, 6),
    (Mode::V2a, 2),
    (Mode::V2a, 4),
];

fn c05_outlier_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for l in 0..100 {
        let (mode, n) = MODE_WIDTHS[l % MODE_WIDTHS.len()];
        let conv = if l % 2 == 0 {
            ResidualConvention::Add
        } else {
            ResidualConvention::Overwrite
        };
        let policy = QualityPolicy {
            residual_convention: conv,
            ..QualityPolicy::default()
        };
        let (rows, cols) = (rng.random_range(2..16), 128 * rng.random_range(1..3));
        let w = spiky_matrix(&mut rng, rows, cols);
        let layer = encode_layer_at("", &w, LayerClass::SelfAttention, &policy, mode, n).map_err(|e| e.to_string())?;
        let d = decode_layer(&layer).map_err(|e| e.to_string())?;
        ensure!(!layer.outliers.is_empty(), "layer {l} extracted nothing");
        for e in &layer.outliers.entries {
            let err = (d.get(e.row, e.col) - w.get(e.row, e.col)).abs();
            let ulp = e.value.ulp();
            ensure!(
                err <= ulp,
                "layer {l} ({mode} N={n} {conv:?}) at ({}, {}): error {err} exceeds ulp {ulp}",
                e.row,
                e.col
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} outlier positions within one binary16 ulp"))
}

fn directional_population(profile: &str, class: LayerClass) -> Result<(Vec<f64>, Vec<f64>), String> {
    let p = synth::profile(profile).map_err(|e| e.to_string())?;
    let policy = QualityPolicy::default();
    let mut ratios = Vec::new();
    let mut dcos = Vec::new();
    for seed in 0..8 {
        let w = synth::generate(&p, 256, 512, seed).map_err(|e| e.to_string())?;
        let r = outlier_effect(&w, class, &policy, Mode::V2, 3).map_err(|e| e.to_string())?;
        ratios.push(r.mse_ratio);
        dcos.push(r.delta_cos());
    }
    Ok((ratios, dcos))
}

fn c06_directional_mse() -> Outcome {
    let start = Instant::now();
    let (attn, attn_dcos) = directional_population("attn_kva", LayerClass::SelfAttention)?;
    let (routed, routed_dcos) = directional_population("routed", LayerClass::RoutedExpert)?;
    let elapsed = start.elapsed();
    let (a, r, rd) = (median(&attn), median(&routed), median(&routed_dcos));
    ensure!(a >= ATTN_MSE_RATIO_MIN, "attn_kva MSE ratio p50 {a:.3}");
    ensure!(r <= ROUTED_MSE_RATIO_MAX, "routed MSE ratio p50 {r:.3}");
    ensure!(rd <= ROUTED_DCOS_MAX, "routed delta cos p50 {rd:.5}");
    ensure!(elapsed < DIRECTIONAL_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "attn_kva {a:.2}x (dcos {:.4}), routed {r:.3}x (dcos {rd:.5}) in {elapsed:.1?}",
        median(&attn_dcos)
    ))
}

fn c07_algorithm_properties() -> Outcome {
    let names = [
        "attn_kva",
        "routed",
        "glm_shared_gate_up",
        "qwen_attn_k",
        "truncated_gaussian",
    ];
    let taus: Vec<f64> = (0..20).map(|i| 0.90 + 0.005 * i as f64).collect();
    let mut distinct = std::collections::BTreeSet::new();
    for m in 0..50 {
        let p = synth::profile(names[m % names.len()]).unwrap();
        let w = synth::generate(&p, 32, 128, 700 + m as u64).map_err(|e| e.to_string())?;
        for mode in [Mode::V2, Mode::V2a] {
            let mut last = 0;
            for &tau in &taus {
                let policy = QualityPolicy::with_thresholds(tau, tau);
                let r = auto_select(&w, LayerClass::SelfAttention, &policy, mode).map_err(|e| e.to_string())?;
                ensure!(
                    r.chosen_n >= last,
                    "matrix {m} {mode}: N fell to {} at tau {tau}",
                    r.chosen_n
                );
                last = r.chosen_n;
                distinct.insert(r.chosen_n);
            }
            let policy = QualityPolicy::with_thresholds(0.97, 0.93);
            let routed = auto_select(&w, LayerClass::RoutedExpert, &policy, mode).unwrap();
            let strict = auto_select(&w, LayerClass::SelfAttention, &policy, mode).unwrap();
            ensure!(
                routed.chosen_n <= strict.chosen_n,
                "matrix {m} {mode}: routed N above strict N"
            );
            let never = QualityPolicy::with_thresholds(1.5, 1.5);
            let r = auto_select(&w, LayerClass::SelfAttention, &never, mode).unwrap();
            let max = *never.candidates(mode).last().unwrap();
            ensure!(
                r.fallback_used && r.chosen_n == max,
                "matrix {m} {mode}: fallback gave {}",
                r.chosen_n
            );
        }
    }
    Ok(format!(
        "20 thresholds x 50 matrices x 2 modes monotone; widths seen {distinct:?}"
    ))
}

fn c08_geometry() -> Outcome {
    let admissible: Vec<u8> = (2..=6u8)
        .filter(|&n| v2a_lane_geometry(n, 128).unwrap().is_admissible())
        .collect();
    ensure!(admissible == vec![2, 4], "admissible at g=128: {admissible:?}");
    let expect = |n, g, lanes, per| match v2a_lane_geometry(n, g).unwrap() {
        GeometryVerdict::Admissible {
            lanes_per_group,
            cb_per_iter,
        } => lanes_per_group == lanes && cb_per_iter == per,
        _ => false,
    };
    ensure!(expect(3, 80, 8, 4), "(3, 80) not 8 lanes");
    ensure!(expect(4, 128, 16, 2), "(4, 128) not 16 lanes / 2 per iteration");
    ensure!(expect(2, 128, 8, 4), "(2, 128) not 8 lanes / 4 per iteration");
    Ok("g=128 admits {2, 4}; (3,80) -> 8 lanes; (4,128) -> 16 lanes, 2 per iteration".into())
}

fn c09_moe_agreement() -> Outcome {
    let p = synth::profile("routed").unwrap();
    let policy = QualityPolicy::default();
    let trials = 200;
    let mut agree = 0;
    for seed in 0..trials {
        let experts = synth::generate_population(&p, 64, 8, 128, 9_000 + seed).map_err(|e| e.to_string())?;
        let s = moe_sample_select(&experts, &policy, Mode::V2).map_err(|e| e.to_string())?;
        let f = moe_full_select(&experts, &policy, Mode::V2).map_err(|e| e.to_string())?;
        if s.chosen_n == f.chosen_n {
            agree += 1;
        }
    }
    let share = agree as f64 / trials as f64;
    ensure!(share >= MOE_AGREEMENT_MIN, "agreement {:.1}%", 100.0 * share);
    Ok(format!("{agree}/{trials} populations agree"))
}

fn random_model(rng: &mut ChaCha8Rng, id: usize) -> QuantizedModel {
    let layers = (0..rng.random_range(1..=4))
        .map(|j| {
            let (mode, n) = MODE_WIDTHS[rng.random_range(0..MODE_WIDTHS.len())];
            let policy = QualityPolicy {
                residual_convention: if rng.random::<bool>() {
                    ResidualConvention::Add
                } else {
                    ResidualConvention::Overwrite
                },
                group_orientation: if rng.random::<bool>() {
                    GroupOrientation::Row
                } else {
                    GroupOrientation::Column
                },
                ..QualityPolicy::default()
            };
            let class = LayerClass::ALL[rng.random_range(0..LayerClass::ALL.len())];
            let (rows, cols) = (rng.random_range(2..24), rng.random_range(60..300));
            let w = spiky_matrix(rng, rows, cols);
            encode_layer_at(&format!("m{id}.l{j}"), &w, class, &policy, mode, n).unwrap()
        })
        .collect();
    QuantizedModel::new(layers)
}

fn c10_container_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut combos = std::collections::BTreeSet::new();
    for i in 0..100 {
        let model = random_model(&mut rng, i);
        for l in &model.layers {
            combos.insert((l.mode.to_string(), l.n_bits));
        }
        let path = dir.path().join(format!("{i}.xfpq"));
        model.save(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).unwrap();
        let back = QuantizedModel::load(&path).map_err(|e| e.to_string())?;
        ensure!(back == model, "model {i}: loaded model differs");
        ensure!(back.to_bytes().unwrap() == bytes, "model {i}: re-serialization differs");
        for (a, b) in model.layers.iter().zip(&back.layers) {
            let (da, db) = (decode_layer(a).unwrap(), decode_layer(b).unwrap());
            ensure!(
                da.data().iter().zip(db.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "model {i}: decode differs after reload"
            );
        }
        // Flip one bit inside the first layer record.
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut bad = bytes.clone();
        let pos = 12 + rng.random_range(0..len);
        bad[pos] ^= 1 << rng.random_range(0..8);
        match QuantizedModel::from_bytes(&bad) {
            Err(Error::Checksum { layer: 0, .. }) => {}
            other => return Err(format!("model {i}: corruption at byte {pos} gave {other:?}")),
        }
    }
    ensure!(combos.len() == MODE_WIDTHS.len(), "only covered {combos:?}");
    Ok(format!(
        "100 models bit-exact across {} mode/width pairs; corruption caught",
        combos.len()
    ))
}

fn c11_break_even() -> Outcome {
    let y = break_even_outlier_fraction(3.0, 4.0, 0.02, 18.0).map_err(|e| e.to_string())?;
    ensure!((y - BREAK_EVEN_TARGET).abs() <= BREAK_EVEN_TOL, "y = {y}");
    ensure!(
        (3.0 / 8.0 + 18.0 * y - (4.0 / 8.0 + 0.02 * 18.0)).abs() < 1e-9,
        "equation residual"
    );
    Ok(format!("y = {:.3}%", 100.0 * y))
}

fn c12_effective_bits() -> Outcome {
    let n = 4096 * 4096;
    let e2 = effective_bits_for(Mode::V2a, 2, 4096, 4096, 128, 32, 0).unwrap();
    let e4 = effective_bits_for(Mode::V2a, 4, 4096, 4096, 128, 32, 0).unwrap();
    ensure!((e2.total - 2.3125).abs() <= EFF_BITS_TOL, "V2a N=2: {}", e2.total);
    ensure!((e4.total - 4.3125).abs() <= EFF_BITS_TOL, "V2a N=4: {}", e4.total);
    let capped = effective_bits_for(Mode::V2a, 2, 4096, 4096, 128, 32, cap_count(0.02, n)).unwrap();
    ensure!(
        (capped.outlier_bits_per_weight - 2.88).abs() <= 1e-3,
        "outliers add {}",
        capped.outlier_bits_per_weight
    );
    ensure!(
        (capped.total - capped.total_without_outliers - capped.outlier_bits_per_weight).abs() < 1e-12,
        "parts do not sum"
    );
    // A real encoded layer reports the same accounting.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = spiky_matrix(&mut rng, 16, 256);
    let layer = encode_layer_at(
        "",
        &w,
        LayerClass::RoutedExpert,
        &QualityPolicy::default(),
        Mode::V2a,
        2,
    )
    .unwrap();
    let direct = effective_bits(&layer);
    let formula = effective_bits_for(Mode::V2a, 2, 16, 256, 128, 32, layer.outliers.len()).unwrap();
    ensure!(direct == formula, "encoded layer accounting differs");
    Ok(format!(
        "V2a N=2 {:.4}, N=4 {:.4}, 2% outliers +{:.2}",
        e2.total, e4.total, capped.outlier_bits_per_weight
    ))
}

fn c13_library_size() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = WeightMatrix::new(64, 64, gaussian(64, 64, &mut rng)).unwrap();
    let cbs = fit_channel_codebooks(&w, 4, 20);
    let (lib, _) = libfit(&cbs, 32, 20).map_err(|e| e.to_string())?;
    ensure!(lib.len() == 32, "library has {} entries", lib.len());
    ensure!(lib.byte_size() == 1024, "library is {} bytes", lib.byte_size());
    Ok("32 x 16 x 2 B = 1024 B".into())
}

fn c14_synth_fidelity() -> Outcome {
    let p = synth::profile("glm_attn_k").unwrap();
    let mut tails = Vec::new();
    for seed in 0..10 {
        let w = synth::generate(&p, 128, 512, seed).map_err(|e| e.to_string())?;
        let m = synth::measure(&w);
        ensure!(
            (m.tail_fraction_3sigma / 0.0148 - 1.0).abs() <= TAIL_REL_TOL,
            "seed {seed}: tail {:.4}%",
            100.0 * m.tail_fraction_3sigma
        );
        ensure!(
            (PLANTED_SIGMA_RANGE.0..=PLANTED_SIGMA_RANGE.1).contains(&m.max_abs_sigma),
            "seed {seed}: max {:.2} sigma",
            m.max_abs_sigma
        );
        tails.push(m.tail_fraction_3sigma);
    }
    let lo = tails.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = tails.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "tail {:.3}%..{:.3}% over 10 seeds, maxima in range",
        100.0 * lo,
        100.0 * hi
    ))
}

fn c15_sweep_structure() -> Outcome {
    let grid = preset_grid();
    let expected = [
        ("G", 0.92, 0.80),
        ("H1", 0.96, 0.92),
        ("H1.5", 0.96, 0.93),
        ("H1.7", 0.96, 0.935),
        ("H", 0.96, 0.94),
    ];
    for (p, (label, s, l)) in grid.iter().zip(expected) {
        ensure!(
            p.label == label && p.tau_strict == s && p.tau_lazy == l,
            "grid point {p:?} differs from ({label}, {s}, {l})"
        );
    }
    ensure!(grid.len() == expected.len(), "grid has {} points", grid.len());
    let profile = synthetic_397b_profile();
    let points = sweep(&profile, &grid, &SweepConfig::default(), &BTreeMap::new()).map_err(|e| e.to_string())?;
    for w in points.windows(2) {
        ensure!(
            w[0].spike_bytes <= w[1].spike_bytes,
            "spike {} ({}) above {} ({})",
            w[0].label,
            w[0].spike_bytes,
            w[1].label,
            w[1].spike_bytes
        );
    }
    let gib: Vec<String> = points
        .iter()
        .map(|p| format!("{} {:.1}", p.label, p.spike_bytes as f64 / (1u64 << 30) as f64))
        .collect();
    Ok(format!("spike GiB non-decreasing: {}", gib.join(", ")))
}

fn main() {
    let criteria: [Criterion; 15] = [
        ("packing roundtrip", c01_packing_roundtrip),
        ("packing table fidelity", c02_packing_table),
        ("Lloyd monotonicity", c03_lloyd_monotone),
        ("Lloyd vs exhaustive oracle", c04_lloyd_oracle),
        ("outlier-position exactness", c05_outlier_exactness),
        ("directional outlier effect", c06_directional_mse),
        ("auto-select properties", c07_algorithm_properties),
        ("V2a lane geometry", c08_geometry),
        ("MoE sampling agreement", c09_moe_agreement),
        ("container roundtrip", c10_container_roundtrip),
        ("break-even fraction", c11_break_even),
        ("effective bits", c12_effective_bits),
        ("V2a library size", c13_library_size),
        ("synth fidelity", c14_synth_fidelity),
        ("H-sweep structure", c15_sweep_structure),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({secs:.2}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({secs:.2}s) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
