//! Synthetic weight matrices with controlled tail statistics.
//!
//! Each element is drawn from a mixture of a unit Gaussian and a Student-t
//! (three degrees of freedom) component scaled by [`TAIL_SCALE`]. The mixture
//! weight is found by bisection so that the fraction of elements beyond
//! 3σ matches the profile. Bulk elements are clamped to `max_abs_sigma`, then
//! planted outliers are placed at uniformly random positions so that each
//! sits at its stated multiple of the final matrix σ (the outlier's own
//! contribution to σ included).
//!
//! The random stream is ChaCha20 seeded from a `u64`; expert populations use
//! one ChaCha stream id per expert.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::WeightMatrix;

/// Scale of the Student-t mixture component relative to the unit bulk.
pub const TAIL_SCALE: f64 = 3.0;
const TAIL_DOF: f64 = 3.0;
const BISECTION_STEPS: usize = 40;
const CLAMP_MARGIN: f64 = 0.999;
const MAX_CLAMP_ROUNDS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedOutliers {
    pub magnitude_sigma: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionProfile {
    pub name: String,
    /// Fraction of elements with |w - μ| > 3σ.
    pub tail_fraction_3sigma: f64,
    /// Largest |w - μ| in units of σ.
    pub max_abs_sigma: f64,
    #[serde(default)]
    pub planted_outliers: Vec<PlantedOutliers>,
}

impl DistributionProfile {
    fn infeasible(&self, reason: impl Into<String>) -> Error {
        Error::InfeasibleProfile {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }

    /// Checks that depend only on the profile and the element count.
    pub fn check(&self, numel: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tail_fraction_3sigma) {
            return Err(self.infeasible(format!("tail fraction {} outside [0, 1]", self.tail_fraction_3sigma)));
        }
        if !self.max_abs_sigma.is_finite() || self.max_abs_sigma <= 0.0 {
            return Err(self.infeasible(format!("max |w| of {}σ is not positive", self.max_abs_sigma)));
        }
        if self.tail_fraction_3sigma > 0.0 && self.max_abs_sigma <= 3.0 {
            return Err(self.infeasible(format!(
                "a {}σ limit leaves no room beyond 3σ for a {} tail",
                self.max_abs_sigma, self.tail_fraction_3sigma
            )));
        }
        let mut planted = 0usize;
        let mut energy = 0.0;
        for p in &self.planted_outliers {
            if p.magnitude_sigma.is_nan() || p.magnitude_sigma <= 0.0 || p.magnitude_sigma > self.max_abs_sigma {
                return Err(self.infeasible(format!(
                    "planted magnitude {}σ outside (0, {}σ]",
                    p.magnitude_sigma, self.max_abs_sigma
                )));
            }
            planted += p.count;
            energy += p.count as f64 * p.magnitude_sigma * p.magnitude_sigma;
        }
        if planted >= numel {
            return Err(self.infeasible(format!("{planted} planted outliers in {numel} elements")));
        }
        // Each planted value contributes a²/n of the final variance.
        if energy >= numel as f64 {
            return Err(self.infeasible(format!(
                "planted outliers carry {energy:.0}σ² of variance, more than {numel} elements allow"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct Registry {
    profiles: Vec<DistributionProfile>,
    aliases: BTreeMap<String, String>,
}

fn registry() -> &'static Registry {
    static REGISTRY: OnceLock<Registry> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        serde_json::from_str(include_str!("../data/profiles.json")).expect("bundled profile registry parses")
    })
}

/// Canonical profile names, in registry order.
pub fn profile_names() -> Vec<&'static str> {
    registry().profiles.iter().map(|p| p.name.as_str()).collect()
}

/// Alias names and their targets.
pub fn profile_aliases() -> impl Iterator<Item = (&'static str, &'static str)> {
    registry().aliases.iter().map(|(a, b)| (a.as_str(), b.as_str()))
}

/// Look up a bundled profile by canonical name or alias.
pub fn profile(name: &str) -> Result<DistributionProfile> {
    let reg = registry();
    let canonical = reg.aliases.get(name).map(String::as_str).unwrap_or(name);
    reg.profiles
        .iter()
        .find(|p| p.name == canonical)
        .cloned()
        .ok_or_else(|| Error::UnknownProfile(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileMeasurement {
    pub mean: f64,
    pub sigma: f64,
    pub tail_fraction_3sigma: f64,
    pub max_abs_sigma: f64,
}

fn stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

fn tail_fraction(x: &[f64]) -> f64 {
    let (mu, sd) = stats(x);
    if sd == 0.0 {
        return 0.0;
    }
    x.iter().filter(|&&v| (v - mu).abs() > 3.0 * sd).count() as f64 / x.len() as f64
}

pub fn measure(w: &WeightMatrix) -> ProfileMeasurement {
    let x: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let (mu, sd) = stats(&x);
    let max_dev = x.iter().map(|v| (v - mu).abs()).fold(0.0, f64::max);
    ProfileMeasurement {
        mean: mu,
        sigma: sd,
        tail_fraction_3sigma: tail_fraction(&x),
        max_abs_sigma: if sd == 0.0 { 0.0 } else { max_dev / sd },
    }
}

/// Per-element random draws shared by every mixture weight tried.
struct Draws {
    normal: Vec<f64>,
    tail: Vec<f64>,
    pick: Vec<f64>,
    planted: Vec<(usize, f64)>,
}

fn draw(profile: &DistributionProfile, numel: usize, rng: &mut ChaCha20Rng) -> Draws {
    let student = StudentT::new(TAIL_DOF).expect("positive degrees of freedom");
    let mut normal = Vec::with_capacity(numel);
    let mut tail = Vec::with_capacity(numel);
    let mut pick = Vec::with_capacity(numel);
    for _ in 0..numel {
        normal.push(StandardNormal.sample(rng));
        tail.push(TAIL_SCALE * student.sample(rng));
        pick.push(rng.random::<f64>());
    }
    let magnitudes: Vec<f64> = profile
        .planted_outliers
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.magnitude_sigma, p.count))
        .collect();
    let positions = sample(rng, numel, magnitudes.len()).into_vec();
    let planted = positions
        .into_iter()
        .zip(magnitudes)
        .map(|(pos, a)| (pos, if rng.random::<bool>() { a } else { -a }))
        .collect();
    Draws {
        normal,
        tail,
        pick,
        planted,
    }
}

/// Clamp until no element lies beyond `limit` σ of the current statistics.
fn clamp_bulk(x: &mut [f64], limit: f64) {
    for _ in 0..MAX_CLAMP_ROUNDS {
        let (mu, sd) = stats(x);
        let bound = limit * sd;
        if x.iter().all(|v| (v - mu).abs() <= bound) {
            return;
        }
        let inner = CLAMP_MARGIN * bound;
        for v in x.iter_mut() {
            *v = v.clamp(mu - inner, mu + inner);
        }
    }
}

/// Place each planted value at `μ + a·σ` of the final matrix.
fn plant(x: &mut [f64], planted: &[(usize, f64)]) -> Result<()> {
    if planted.is_empty() {
        return Ok(());
    }
    let n = x.len() as f64;
    let mut is_planted = vec![false; x.len()];
    for &(p, _) in planted {
        is_planted[p] = true;
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for (v, &skip) in x.iter().zip(&is_planted) {
        if !skip {
            s1 += v;
            s2 += v * v;
        }
    }
    let (mut mu, mut sd) = {
        let m = s1 / (n - planted.len() as f64);
        (m, (s2 / (n - planted.len() as f64) - m * m).max(0.0).sqrt())
    };
    for _ in 0..100_000 {
        let (mut p1, mut p2) = (0.0, 0.0);
        for &(_, a) in planted {
            let v = mu + a * sd;
            p1 += v;
            p2 += v * v;
        }
        let mu_next = (s1 + p1) / n;
        let sd_next = ((s2 + p2) / n - mu_next * mu_next).max(0.0).sqrt();
        let done = (mu_next - mu).abs() <= 1e-14 * sd_next.max(1.0) && (sd_next - sd).abs() <= 1e-14 * sd_next;
        mu = mu_next;
        sd = sd_next;
        if done {
            for &(p, a) in planted {
                x[p] = mu + a * sd;
            }
            return Ok(());
        }
    }
    Err(Error::InvalidArgument(
        "planted outlier placement did not converge".into(),
    ))
}

fn realize(profile: &DistributionProfile, d: &Draws, weight: f64) -> Result<Vec<f64>> {
    let mut x: Vec<f64> = d
        .pick
        .iter()
        .zip(d.normal.iter().zip(&d.tail))
        .map(|(&u, (&z, &t))| if u < weight { t } else { z })
        .collect();
    clamp_bulk(&mut x, profile.max_abs_sigma);
    plant(&mut x, &d.planted)?;
    Ok(x)
}

/// Mixture weight whose realized 3σ tail fraction is closest to the target
/// along the bisection path.
fn solve_weight(profile: &DistributionProfile, d: &Draws) -> Result<f64> {
    let target = profile.tail_fraction_3sigma;
    let at = |w: f64| -> Result<f64> { Ok(tail_fraction(&realize(profile, d, w)?)) };
    let f_lo = at(0.0)?;
    if f_lo >= target {
        return Ok(0.0);
    }
    let f_hi = at(1.0)?;
    if f_hi <= target {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let (mut best, mut best_err) = (0.0, (f_lo - target).abs());
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let f = at(mid)?;
        if (f - target).abs() < best_err {
            best = mid;
            best_err = (f - target).abs();
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

fn generate_from(
    profile: &DistributionProfile,
    rows: usize,
    cols: usize,
    mut rng: ChaCha20Rng,
) -> Result<WeightMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot generate a {rows}x{cols} matrix"
        )));
    }
    let numel = rows * cols;
    profile.check(numel)?;
    let draws = draw(profile, numel, &mut rng);
    let weight = solve_weight(profile, &draws)?;
    let x = realize(profile, &draws, weight)?;
    WeightMatrix::new(rows, cols, x.into_iter().map(|v| v as f32).collect())
}

/// Deterministic in `(profile, rows, cols, seed)`.
pub fn generate(profile: &DistributionProfile, rows: usize, cols: usize, seed: u64) -> Result<WeightMatrix> {
    generate_from(profile, rows, cols, ChaCha20Rng::seed_from_u64(seed))
}

/// Expert `i` of a population uses ChaCha stream `i` under the shared seed.
pub fn generate_expert(
    profile: &DistributionProfile,
    rows: usize,
    cols: usize,
    seed: u64,
    expert: u64,
) -> Result<WeightMatrix> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(expert);
    generate_from(profile, rows, cols, rng)
}

pub fn generate_population(
    profile: &DistributionProfile,
    experts: usize,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Vec<WeightMatrix>> {
    crate::par::map_indexed(experts, |i| generate_expert(profile, rows, cols, seed, i as u64))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outlier::extract_outliers;

    #[test]
    fn registry_loads() {
        let names = profile_names();
        assert!(names.contains(&"glm_attn_k"));
        assert!(names.contains(&"qwen_shared_gate_up"));
        for (alias, target) in profile_aliases() {
            assert_eq!(profile(alias).unwrap().name, target);
        }
        let k = profile("attn_kva").unwrap();
        assert_eq!(k.tail_fraction_3sigma, 0.0148);
        assert_eq!(
            k.planted_outliers,
            vec![PlantedOutliers {
                magnitude_sigma: 49.0,
                count: 1
            }]
        );
        assert!(matches!(profile("nope"), Err(Error::UnknownProfile(_))));
        for name in names {
            profile(name).unwrap().check(1 << 16).unwrap();
        }
    }

    #[test]
    fn deterministic() {
        let p = profile("glm_attn_k").unwrap();
        let a = generate(&p, 16, 256, 7).unwrap();
        assert_eq!(a, generate(&p, 16, 256, 7).unwrap());
        assert_ne!(a, generate(&p, 16, 256, 8).unwrap());
        let e0 = generate_expert(&p, 32, 128, 7, 0).unwrap();
        let e1 = generate_expert(&p, 32, 128, 7, 1).unwrap();
        assert_ne!(e0, e1);
        assert_eq!(generate_population(&p, 2, 32, 128, 7).unwrap(), vec![e0, e1]);
    }

    #[test]
    fn truncated_gaussian_has_empty_tail() {
        let p = profile("truncated_gaussian").unwrap();
        for seed in 0..3 {
            let m = measure(&generate(&p, 64, 256, seed).unwrap());
            assert_eq!(m.tail_fraction_3sigma, 0.0);
            assert!(m.max_abs_sigma <= 3.0);
        }
    }

    #[test]
    fn attn_k_tail_and_maximum() {
        let p = profile("glm_attn_k").unwrap();
        let m = measure(&generate(&p, 128, 512, 1).unwrap());
        assert!((m.tail_fraction_3sigma / 0.0148 - 1.0).abs() <= 0.2, "{m:?}");
        assert!((44.0..=54.0).contains(&m.max_abs_sigma), "{m:?}");
    }

    #[test]
    fn planted_outlier_is_self_consistent() {
        let p = DistributionProfile {
            name: "one".into(),
            tail_fraction_3sigma: 0.0,
            max_abs_sigma: 49.0,
            planted_outliers: vec![PlantedOutliers {
                magnitude_sigma: 49.0,
                count: 1,
            }],
        };
        // Without the planted value the bulk would be pure Gaussian; the check
        // below holds for any bulk.
        let w = generate(&p, 16, 256, 3).unwrap();
        let m = measure(&w);
        assert!((m.max_abs_sigma - 49.0).abs() < 1e-3, "{m:?}");
    }

    #[test]
    fn routed_profile_is_near_gaussian() {
        let p = profile("routed").unwrap();
        let w = generate(&p, 64, 512, 5).unwrap();
        let (_, set) = extract_outliers(&w, 4.0, 0.02);
        assert!((set.len() as f64) < 0.001 * w.numel() as f64, "{}", set.len());
    }

    #[test]
    fn infeasible_profiles() {
        let base = DistributionProfile {
            name: "x".into(),
            tail_fraction_3sigma: 0.01,
            max_abs_sigma: 2.5,
            planted_outliers: vec![],
        };
        assert!(matches!(generate(&base, 8, 8, 0), Err(Error::InfeasibleProfile { .. })));
        let too_big = DistributionProfile {
            max_abs_sigma: 49.0,
            planted_outliers: vec![PlantedOutliers {
                magnitude_sigma: 49.0,
                count: 1,
            }],
            ..base.clone()
        };
        assert!(generate(&too_big, 16, 128, 0).is_err());
        assert!(generate(&too_big, 32, 128, 0).is_ok());
        let over_max = DistributionProfile {
            max_abs_sigma: 10.0,
            planted_outliers: vec![PlantedOutliers {
                magnitude_sigma: 20.0,
                count: 1,
            }],
            ..base.clone()
        };
        assert!(generate(&over_max, 32, 128, 0).is_err());
        let bad_tail = DistributionProfile {
            tail_fraction_3sigma: 1.5,
            max_abs_sigma: 6.0,
            ..base
        };
        assert!(generate(&bad_tail, 8, 8, 0).is_err());
        assert!(generate(&profile("gaussian").unwrap(), 0, 8, 0).is_err());
    }
}
