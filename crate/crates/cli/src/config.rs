//! Policy resolution and the layer class map.
//!
//! Precedence, highest first: command-line flags, environment variables,
//! the JSON config file, built-in defaults. Clap resolves flag-over-env;
//! this module layers the result over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use xfp_core::autoselect::ExpertSampling;
use xfp_core::library::GroupOrientation;
use xfp_core::outlier::ResidualConvention;
use xfp_core::{LayerClass, QualityPolicy};

#[derive(Args, Debug, Clone, Default)]
pub struct PolicyArgs {
    /// JSON file holding quality-policy fields; absent fields keep defaults.
    #[arg(long, env = "XFP_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Median-cosine floor for every class except routed experts.
    #[arg(long, env = "XFP_MIN_COS_STRICT", value_name = "TAU")]
    pub tau_strict: Option<f64>,
    /// Median-cosine floor for routed experts.
    #[arg(long, env = "XFP_MIN_COS_LAZY", value_name = "TAU")]
    pub tau_lazy: Option<f64>,
    /// V2a group size in weights.
    #[arg(long, env = "XFP_GROUP_SIZE")]
    pub group_size: Option<usize>,
    /// Library-fit iterations for routed experts.
    #[arg(long, env = "XFP_MOE_LLOYD_ITERS")]
    pub moe_lloyd_iters: Option<usize>,
    /// Lloyd iterations for per-channel codebooks.
    #[arg(long)]
    pub lloyd_iters: Option<usize>,
    /// Outlier threshold in standard deviations.
    #[arg(long)]
    pub k: Option<f64>,
    /// Maximum fraction of weights stored as outliers.
    #[arg(long)]
    pub cap: Option<f64>,
    /// Codebooks in the V2a library.
    #[arg(long)]
    pub library_size: Option<usize>,
    /// Experts sampled for an MoE block decision.
    #[arg(long)]
    pub moe_sample_size: Option<usize>,
    /// Draw sampled experts at random with this seed instead of taking the first ones.
    #[arg(long, value_name = "SEED")]
    pub expert_seed: Option<u64>,
    /// Store raw outlier values that replace the decode instead of additive residuals.
    #[arg(long)]
    pub overwrite_residuals: bool,
    /// Form V2a groups down input columns instead of along rows.
    #[arg(long)]
    pub column_groups: bool,
}

impl PolicyArgs {
    pub fn resolve(&self) -> Result<QualityPolicy> {
        let mut policy = match &self.config {
            Some(path) => load_policy(path)?,
            None => QualityPolicy::default(),
        };
        set(&mut policy.tau_strict, self.tau_strict);
        set(&mut policy.tau_lazy, self.tau_lazy);
        set(&mut policy.group_size, self.group_size);
        set(&mut policy.moe_lloyd_iters, self.moe_lloyd_iters);
        set(&mut policy.lloyd_iters, self.lloyd_iters);
        set(&mut policy.k, self.k);
        set(&mut policy.cap_fraction, self.cap);
        set(&mut policy.library_size, self.library_size);
        set(&mut policy.moe_sample_size, self.moe_sample_size);
        if let Some(seed) = self.expert_seed {
            policy.expert_sampling = ExpertSampling::Seeded(seed);
        }
        if self.overwrite_residuals {
            policy.residual_convention = ResidualConvention::Overwrite;
        }
        if self.column_groups {
            policy.group_orientation = GroupOrientation::Column;
        }
        policy.validate().context("invalid quality policy")?;
        Ok(policy)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_policy(path: &Path) -> Result<QualityPolicy> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Layer name to class, read from a flat JSON object such as
/// `{"blk.0.attn_k": "self_attention"}`.
#[derive(Debug, Clone, Default)]
pub struct ClassMap {
    map: BTreeMap<String, LayerClass>,
    fallback: Option<LayerClass>,
}

impl ClassMap {
    pub fn load(path: Option<&Path>, fallback: Option<LayerClass>) -> Result<Self> {
        let map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading class map {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing class map {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { map, fallback })
    }

    pub fn class_of(&self, name: &str) -> Result<LayerClass> {
        match self.map.get(name).copied().or(self.fallback) {
            Some(c) => Ok(c),
            None => bail!("layer `{name}` is missing from the class map and no --default-class was given"),
        }
    }
}

/// File-system-safe form of a layer name.
pub fn file_stem_for(name: &str, index: usize) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean.is_empty() || clean.chars().all(|c| c == '.') {
        format!("layer_{index}")
    } else {
        clean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(&path, r#"{"tau_strict": 0.99, "tau_lazy": 0.9, "group_size": 64}"#).unwrap();
        let args = PolicyArgs {
            config: Some(path),
            tau_lazy: Some(0.95),
            ..PolicyArgs::default()
        };
        let p = args.resolve().unwrap();
        assert_eq!((p.tau_strict, p.tau_lazy, p.group_size), (0.99, 0.95, 64));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(&path, r#"{"tau_stirct": 0.99}"#).unwrap();
        let args = PolicyArgs {
            config: Some(path),
            ..PolicyArgs::default()
        };
        assert!(args.resolve().is_err());
    }

    #[test]
    fn invalid_merged_policy_is_rejected() {
        let args = PolicyArgs {
            tau_strict: Some(0.9),
            tau_lazy: Some(0.95),
            ..PolicyArgs::default()
        };
        assert!(args.resolve().is_err());
    }

    #[test]
    fn class_map_falls_back() {
        let m = ClassMap::load(None, Some(LayerClass::LmHead)).unwrap();
        assert_eq!(m.class_of("x").unwrap(), LayerClass::LmHead);
        assert!(ClassMap::load(None, None).unwrap().class_of("x").is_err());
    }

    #[test]
    fn stems_are_safe() {
        assert_eq!(file_stem_for("blk.0/attn k", 3), "blk.0_attn_k");
        assert_eq!(file_stem_for("", 3), "layer_3");
        assert_eq!(file_stem_for("..", 1), "layer_1");
    }
}
