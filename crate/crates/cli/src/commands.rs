//! Subcommand implementations. Each returns a JSON value for `--json` mode
//! and a plain-text rendering for humans.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use xfp_core::autoselect::CandidateScore;
use xfp_core::container::{self, outlier_effect_of};
use xfp_core::hprocess::{self, ExternalVerdict, GridPoint, ModelProfile, OperatingPoint, SweepConfig};
use xfp_core::packing::{v2a_lane_geometry, GeometryVerdict};
use xfp_core::tensor::percentile;
use xfp_core::xwt::{self, Dtype};
use xfp_core::{synth, EffectiveBits, LayerClass, Mode, QualityPolicy, QuantizedLayer, QuantizedModel};

use crate::config::{file_stem_for, ClassMap};

/// Version of every JSON document this tool emits.
pub const SCHEMA_VERSION: u32 = 1;

pub struct Output {
    pub json: Value,
    pub text: String,
}

fn envelope(kind: &str, body: Value) -> Value {
    let mut doc = json!({
        "schema_version": SCHEMA_VERSION,
        "container_version": container::VERSION,
        "kind": kind,
    });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    doc
}

#[derive(Serialize)]
struct QuantizedLayerReport {
    name: String,
    source: PathBuf,
    class: LayerClass,
    rows: usize,
    cols: usize,
    chosen_n: u8,
    active_tau: f64,
    fallback_used: bool,
    candidates: Vec<CandidateScore>,
    outlier_count: usize,
    effective_bits: EffectiveBits,
}

/// Mean of per-layer accounting weighted by parameter count.
fn weighted_bits(layers: &[QuantizedLayer]) -> Value {
    let numel: usize = layers.iter().map(QuantizedLayer::numel).sum();
    let (mut total, mut without) = (0.0, 0.0);
    for l in layers {
        let b = container::effective_bits(l);
        total += b.total * l.numel() as f64;
        without += b.total_without_outliers * l.numel() as f64;
    }
    let div = numel.max(1) as f64;
    json!({ "total": total / div, "total_without_outliers": without / div, "weights": numel })
}

pub fn quantize(
    inputs: &[PathBuf],
    classes: &ClassMap,
    mode: Mode,
    policy: &QualityPolicy,
    output: &Path,
) -> Result<Output> {
    if inputs.is_empty() {
        bail!("no input tensors given");
    }
    let mut names = BTreeMap::new();
    for path in inputs {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("input {} has no usable file name", path.display()))?
            .to_string();
        if let Some(prev) = names.insert(name.clone(), path) {
            bail!(
                "layer name `{name}` used by both {} and {}",
                prev.display(),
                path.display()
            );
        }
    }
    let results: Vec<(QuantizedLayer, QuantizedLayerReport)> = inputs
        .par_iter()
        .map(|path| -> Result<_> {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let class = classes.class_of(&name)?;
            let w = xwt::read(path).with_context(|| format!("reading {}", path.display()))?;
            let (layer, report) = container::encode_layer_with_report(&name, &w, class, policy, mode)
                .with_context(|| format!("quantizing {name}"))?;
            let summary = QuantizedLayerReport {
                name,
                source: path.clone(),
                class,
                rows: layer.rows,
                cols: layer.cols,
                chosen_n: report.chosen_n,
                active_tau: report.active_tau,
                fallback_used: report.fallback_used,
                candidates: report.candidates,
                outlier_count: report.outlier_count,
                effective_bits: container::effective_bits(&layer),
            };
            Ok((layer, summary))
        })
        .collect::<Result<_>>()?;
    let (layers, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let totals = weighted_bits(&layers);
    QuantizedModel::new(layers)
        .save(output)
        .with_context(|| format!("writing {}", output.display()))?;

    let mut text = format!(
        "{:<32} {:<16} {:>3} {:>9} {:>8} {:>9}\n",
        "layer", "class", "N", "cos@N", "outliers", "eff bits"
    );
    for r in &reports {
        let cos = r.candidates.last().map_or(f64::NAN, |c| c.median_cos);
        text += &format!(
            "{:<32} {:<16} {:>3} {:>9.5} {:>8} {:>9.4}{}\n",
            r.name,
            r.class.name(),
            r.chosen_n,
            cos,
            r.outlier_count,
            r.effective_bits.total,
            if r.fallback_used { "  (fallback)" } else { "" }
        );
    }
    text += &format!(
        "wrote {} ({} layers, {:.4} bits/weight)\n",
        output.display(),
        reports.len(),
        totals["total"].as_f64().unwrap_or(0.0)
    );
    let json = envelope(
        "quantize",
        json!({ "mode": mode, "output": output, "policy": policy, "layers": reports, "effective_bits": totals }),
    );
    Ok(Output { json, text })
}

pub fn dequantize(input: &Path, out_dir: &Path, dtype: Dtype) -> Result<Output> {
    let model = QuantizedModel::load(input).with_context(|| format!("loading {}", input.display()))?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut files = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let stem = file_stem_for(&layer.name, i);
        if let Some(prev) = seen.insert(stem.clone(), i) {
            bail!("layers {prev} and {i} map to the same file name `{stem}`");
        }
        let path = out_dir.join(format!("{stem}.xwt"));
        let w = container::decode_layer(layer).with_context(|| format!("decoding {}", layer.name))?;
        xwt::write(&path, &w, dtype).with_context(|| format!("writing {}", path.display()))?;
        files.push(json!({ "name": layer.name, "path": path, "rows": layer.rows, "cols": layer.cols }));
    }
    let text = files
        .iter()
        .map(|f| format!("{}\n", f["path"].as_str().unwrap_or_default()))
        .collect();
    Ok(Output {
        json: envelope("dequantize", json!({ "input": input, "files": files })),
        text,
    })
}

#[derive(Serialize)]
struct LayerQuality {
    cos_bulk: f64,
    cos_outlier: f64,
    delta_cos: f64,
    mse_bulk: f64,
    mse_full: f64,
    mse_ratio: f64,
}

#[derive(Serialize)]
struct ReportLayer {
    name: String,
    class: LayerClass,
    mode: Mode,
    n_bits: u8,
    rows: usize,
    cols: usize,
    outlier_count: usize,
    effective_bits: EffectiveBits,
    #[serde(skip_serializing_if = "Option::is_none")]
    quality: Option<LayerQuality>,
}

#[derive(Serialize)]
struct ReconstructionRow {
    class: LayerClass,
    n: usize,
    cos_bulk: f64,
    cos_outlier: f64,
    delta_cos_mean: f64,
    delta_cos_max: f64,
    mse_p50: f64,
    mse_p90: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn reconstruction_table(layers: &[ReportLayer]) -> Vec<ReconstructionRow> {
    let mut by_class: BTreeMap<&str, Vec<&ReportLayer>> = BTreeMap::new();
    for l in layers.iter().filter(|l| l.quality.is_some()) {
        by_class.entry(l.class.name()).or_default().push(l);
    }
    by_class
        .into_values()
        .map(|group| {
            let q: Vec<&LayerQuality> = group.iter().filter_map(|l| l.quality.as_ref()).collect();
            let pick = |f: fn(&LayerQuality) -> f64| q.iter().map(|x| f(x)).collect::<Vec<f64>>();
            let deltas = pick(|x| x.delta_cos);
            let ratios = pick(|x| x.mse_ratio);
            ReconstructionRow {
                class: group[0].class,
                n: group.len(),
                cos_bulk: mean(&pick(|x| x.cos_bulk)),
                cos_outlier: mean(&pick(|x| x.cos_outlier)),
                delta_cos_mean: mean(&deltas),
                delta_cos_max: deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mse_p50: percentile(&ratios, 0.5),
                mse_p90: percentile(&ratios, 0.9),
            }
        })
        .collect()
}

pub fn report(input: &Path, originals: Option<&Path>, policy: &QualityPolicy) -> Result<Output> {
    let model = QuantizedModel::load(input).with_context(|| format!("loading {}", input.display()))?;
    let layers: Vec<ReportLayer> = model
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, layer)| -> Result<ReportLayer> {
            let quality = match originals {
                None => None,
                Some(dir) => {
                    let path = dir.join(format!("{}.xwt", file_stem_for(&layer.name, i)));
                    let w = xwt::read(&path).with_context(|| format!("reading original {}", path.display()))?;
                    let q = outlier_effect_of(&w, layer, policy).with_context(|| format!("scoring {}", layer.name))?;
                    Some(LayerQuality {
                        cos_bulk: q.median_cos_bulk,
                        cos_outlier: q.median_cos,
                        delta_cos: q.delta_cos(),
                        mse_bulk: q.mse_bulk,
                        mse_full: q.mse_full,
                        mse_ratio: q.mse_ratio,
                    })
                }
            };
            Ok(ReportLayer {
                name: layer.name.clone(),
                class: layer.class,
                mode: layer.mode,
                n_bits: layer.n_bits,
                rows: layer.rows,
                cols: layer.cols,
                outlier_count: layer.outliers.len(),
                effective_bits: container::effective_bits(layer),
                quality,
            })
        })
        .collect::<Result<_>>()?;

    let mut histogram: BTreeMap<&str, BTreeMap<u8, usize>> = BTreeMap::new();
    for l in &layers {
        *histogram
            .entry(l.class.name())
            .or_default()
            .entry(l.n_bits)
            .or_default() += 1;
    }
    let totals = weighted_bits(&model.layers);
    let table = reconstruction_table(&layers);

    let mut text = format!(
        "{:<32} {:<16} {:<4} {:>3} {:>9} {:>9} {:>8}\n",
        "layer", "class", "mode", "N", "eff bits", "no outl.", "outliers"
    );
    for l in &layers {
        text += &format!(
            "{:<32} {:<16} {:<4} {:>3} {:>9.4} {:>9.4} {:>8}\n",
            l.name,
            l.class.name(),
            l.mode,
            l.n_bits,
            l.effective_bits.total,
            l.effective_bits.total_without_outliers,
            l.outlier_count
        );
    }
    text += &format!(
        "\nweighted bits/weight: {:.4} with outliers, {:.4} without\n\nN histogram:\n",
        totals["total"].as_f64().unwrap_or(0.0),
        totals["total_without_outliers"].as_f64().unwrap_or(0.0)
    );
    for (class, counts) in &histogram {
        let cells: Vec<String> = counts.iter().map(|(n, c)| format!("N{n}: {c}")).collect();
        text += &format!("  {class:<16} {}\n", cells.join(", "));
    }
    if !table.is_empty() {
        text += &format!(
            "\n{:<16} {:>4} {:>9} {:>11} {:>10} {:>10} {:>8} {:>8}\n",
            "type", "n", "cos bulk", "cos outlier", "dcos mean", "dcos max", "MSE p50", "MSE p90"
        );
        for r in &table {
            text += &format!(
                "{:<16} {:>4} {:>9.5} {:>11.5} {:>+10.5} {:>+10.5} {:>7.2}x {:>7.2}x\n",
                r.class.name(),
                r.n,
                r.cos_bulk,
                r.cos_outlier,
                r.delta_cos_mean,
                r.delta_cos_max,
                r.mse_p50,
                r.mse_p90
            );
        }
    }
    let json = envelope(
        "report",
        json!({
            "input": input,
            "layers": layers,
            "histogram": histogram,
            "effective_bits": totals,
            "reconstruction": table,
        }),
    );
    Ok(Output { json, text })
}

pub struct SweepRequest<'a> {
    pub profile: Option<&'a Path>,
    pub grid: Option<&'a Path>,
    pub verdicts: Option<&'a Path>,
    pub config: SweepConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

pub fn sweep(req: &SweepRequest) -> Result<Output> {
    let profile = match req.profile {
        Some(p) => {
            ModelProfile::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing model profile {}", p.display()))?
        }
        None => hprocess::synthetic_397b_profile(),
    };
    let grid: Vec<GridPoint> = match req.grid {
        Some(p) => read_json(p, "grid")?,
        None => hprocess::preset_grid(),
    };
    let verdicts: BTreeMap<String, ExternalVerdict> = match req.verdicts {
        Some(p) => read_json(p, "verdicts")?,
        None => BTreeMap::new(),
    };
    if let Some(unknown) = verdicts.keys().find(|k| !grid.iter().any(|g| &g.label == *k)) {
        bail!("verdict given for `{unknown}`, which is not a grid point");
    }
    let points: Vec<OperatingPoint> = hprocess::sweep(&profile, &grid, &req.config, &verdicts)?;
    let text = hprocess::render_table(&profile, &points);
    let json = envelope(
        "sweep",
        json!({
            "profile": profile.name,
            "parameters": profile.parameter_count(),
            "hardware": profile.hardware,
            "reserved_bytes": profile.reserved_bytes,
            "config": req.config,
            "points": points,
        }),
    );
    Ok(Output { json, text })
}

pub fn dump_profile() -> Result<Output> {
    let profile = hprocess::synthetic_397b_profile();
    let json = serde_json::to_value(&profile)?;
    let text = serde_json::to_string_pretty(&profile)? + "\n";
    Ok(Output { json, text })
}

pub fn synth_list() -> Output {
    let profiles: Vec<Value> = synth::profile_names()
        .into_iter()
        .filter_map(|n| synth::profile(n).ok())
        .map(|p| serde_json::to_value(p).unwrap_or(Value::Null))
        .collect();
    let aliases: BTreeMap<&str, &str> = synth::profile_aliases().collect();
    let mut text = String::new();
    for p in &profiles {
        text += &format!(
            "{:<22} tail3σ {:>7.4}  max|w| {:>5.1}σ\n",
            p["name"].as_str().unwrap_or_default(),
            p["tail_fraction_3sigma"].as_f64().unwrap_or(0.0),
            p["max_abs_sigma"].as_f64().unwrap_or(0.0)
        );
    }
    for (alias, target) in &aliases {
        text += &format!("{alias:<22} -> {target}\n");
    }
    Output {
        json: envelope("synth_profiles", json!({ "profiles": profiles, "aliases": aliases })),
        text,
    }
}

pub struct SynthRequest<'a> {
    pub profile: &'a str,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub expert: Option<u64>,
    pub output: &'a Path,
    pub dtype: Dtype,
}

pub fn synth(req: &SynthRequest) -> Result<Output> {
    let profile = synth::profile(req.profile)?;
    let w = match req.expert {
        Some(e) => synth::generate_expert(&profile, req.rows, req.cols, req.seed, e)?,
        None => synth::generate(&profile, req.rows, req.cols, req.seed)?,
    };
    xwt::write(req.output, &w, req.dtype).with_context(|| format!("writing {}", req.output.display()))?;
    let m = synth::measure(&w);
    let text = format!(
        "wrote {} ({}x{}, profile {}): σ {:.6}, tail3σ {:.4} (target {:.4}), max|w-μ| {:.2}σ\n",
        req.output.display(),
        req.rows,
        req.cols,
        profile.name,
        m.sigma,
        m.tail_fraction_3sigma,
        profile.tail_fraction_3sigma,
        m.max_abs_sigma
    );
    let json = envelope(
        "synth",
        json!({
            "output": req.output,
            "profile": profile,
            "rows": req.rows,
            "cols": req.cols,
            "seed": req.seed,
            "expert": req.expert,
            "measurement": m,
        }),
    );
    Ok(Output { json, text })
}

pub fn breakeven(bits_low: f64, bits_high: f64, cap: f64, bytes: f64) -> Result<Output> {
    let y = hprocess::break_even_outlier_fraction(bits_low, bits_high, cap, bytes)?;
    Ok(Output {
        json: envelope(
            "breakeven",
            json!({
                "bits_low": bits_low,
                "bits_high": bits_high,
                "cap_high": cap,
                "bytes_per_outlier": bytes,
                "fraction": y,
            }),
        ),
        text: format!(
            "N={bits_low} with outliers matches N={bits_high} at {cap} cap when the outlier fraction is {:.4}%\n",
            100.0 * y
        ),
    })
}

#[derive(Serialize)]
struct GeometryRow {
    n_bits: u8,
    group_size: usize,
    #[serde(flatten)]
    verdict: GeometryVerdict,
}

pub fn geometry(bits: &[u8], group_size: usize) -> Result<Output> {
    let rows: Vec<GeometryRow> = bits
        .iter()
        .map(|&n| {
            Ok(GeometryRow {
                n_bits: n,
                group_size,
                verdict: v2a_lane_geometry(n, group_size)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for r in &rows {
        text += &match &r.verdict {
            GeometryVerdict::Admissible {
                lanes_per_group,
                cb_per_iter,
            } => format!(
                "N={} g={}: admissible ({lanes_per_group} lanes/group, {cb_per_iter} codebooks/iteration)\n",
                r.n_bits, r.group_size
            ),
            GeometryVerdict::Inadmissible { reason } => {
                format!("N={} g={}: inadmissible ({reason})\n", r.n_bits, r.group_size)
            }
        };
    }
    Ok(Output {
        json: envelope("geometry", json!({ "results": rows })),
        text,
    })
}
