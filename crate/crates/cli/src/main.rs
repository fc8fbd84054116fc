//! `xfp`: quantize, inspect and plan codebook-quantized weights.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use xfp_core::hprocess::SweepConfig;
use xfp_core::xwt::Dtype;
use xfp_core::{LayerClass, Mode};

use config::{ClassMap, PolicyArgs};

#[derive(Parser)]
#[command(name = "xfp", version, about = "Quality-targeted codebook weight quantization")]
struct Cli {
    /// Print a machine-readable JSON document instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F16,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F16 => Dtype::F16,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode `.xwt` tensors into one `.xfpq` container.
    Quantize {
        /// Input tensors; each file stem becomes the layer name.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// JSON object mapping layer names to classes.
        #[arg(long, value_name = "FILE")]
        class_map: Option<PathBuf>,
        /// Class for layers absent from the class map.
        #[arg(long, value_parser = parse_class)]
        default_class: Option<LayerClass>,
        #[arg(long, default_value = "v2", value_parser = parse_mode)]
        mode: Mode,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Decode every layer of a container into `.xwt` files.
    Dequantize {
        input: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Storage accounting and, given the originals, reconstruction quality.
    Report {
        input: PathBuf,
        /// Directory with the original `<layer>.xwt` tensors.
        #[arg(long, value_name = "DIR")]
        originals: Option<PathBuf>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Sweep (τ_strict, τ_lazy) operating points against a memory envelope.
    Sweep {
        /// Model profile JSON; the built-in 397B-parameter profile when absent.
        #[arg(long, value_name = "FILE")]
        profile: Option<PathBuf>,
        /// JSON array of {label, tau_strict, tau_lazy}; the preset grid when absent.
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
        /// JSON object mapping grid labels to "pass" or "garbage".
        #[arg(long, value_name = "FILE")]
        verdicts: Option<PathBuf>,
        #[arg(long, default_value = "v2", value_parser = parse_mode)]
        mode: Mode,
        /// Representative matrices per tensor family.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Row cap for representative matrices.
        #[arg(long, default_value_t = 64)]
        sample_rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the built-in model profile as JSON and exit.
        #[arg(long)]
        dump_profile: bool,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Generate a synthetic weight matrix from a distribution profile.
    Synth {
        /// Profile name or alias (see --list).
        #[arg(required_unless_present = "list")]
        profile: Option<String>,
        #[arg(long, default_value_t = 256)]
        rows: usize,
        #[arg(long, default_value_t = 1024)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expert index within a population sharing the seed.
        #[arg(long)]
        expert: Option<u64>,
        #[arg(short, long, required_unless_present = "list")]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
        /// List the available profiles.
        #[arg(long)]
        list: bool,
    },
    /// Outlier density at which a narrower width stops saving memory.
    Breakeven {
        #[arg(long, default_value_t = 3.0)]
        bits_low: f64,
        #[arg(long, default_value_t = 4.0)]
        bits_high: f64,
        /// Outlier fraction paid at the wider width.
        #[arg(long, default_value_t = 0.02)]
        cap: f64,
        #[arg(long, default_value_t = 18.0)]
        bytes_per_outlier: f64,
    },
    /// V2a lane-geometry admissibility of bit widths at a group size.
    Geometry {
        /// Bit width; every width 2..=6 when absent.
        #[arg(long)]
        bits: Option<u8>,
        #[arg(long, default_value_t = 128, env = "XFP_GROUP_SIZE")]
        group_size: usize,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: xfp_core::Error| e.to_string())
}

fn parse_class(s: &str) -> Result<LayerClass, String> {
    s.parse().map_err(|e: xfp_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<commands::Output> {
    match cli.command {
        Command::Quantize {
            inputs,
            output,
            class_map,
            default_class,
            mode,
            policy,
        } => {
            let classes = ClassMap::load(class_map.as_deref(), default_class)?;
            commands::quantize(&inputs, &classes, mode, &policy.resolve()?, &output)
        }
        Command::Dequantize { input, output, dtype } => commands::dequantize(&input, &output, dtype.into()),
        Command::Report {
            input,
            originals,
            policy,
        } => commands::report(&input, originals.as_deref(), &policy.resolve()?),
        Command::Sweep {
            profile,
            grid,
            verdicts,
            mode,
            samples,
            sample_rows,
            seed,
            dump_profile,
            policy,
        } => {
            if dump_profile {
                return commands::dump_profile();
            }
            commands::sweep(&commands::SweepRequest {
                profile: profile.as_deref(),
                grid: grid.as_deref(),
                verdicts: verdicts.as_deref(),
                config: SweepConfig {
                    mode,
                    samples_per_class: samples,
                    sample_rows,
                    seed,
                    policy: policy.resolve()?,
                },
            })
        }
        Command::Synth {
            profile,
            rows,
            cols,
            seed,
            expert,
            output,
            dtype,
            list,
        } => {
            if list {
                return Ok(commands::synth_list());
            }
            let (Some(profile), Some(output)) = (profile, output) else {
                anyhow::bail!("synth needs a profile and --output");
            };
            commands::synth(&commands::SynthRequest {
                profile: &profile,
                rows,
                cols,
                seed,
                expert,
                output: &output,
                dtype: dtype.into(),
            })
        }
        Command::Breakeven {
            bits_low,
            bits_high,
            cap,
            bytes_per_outlier,
        } => commands::breakeven(bits_low, bits_high, cap, bytes_per_outlier),
        Command::Geometry { bits, group_size } => {
            let widths: Vec<u8> = match bits {
                Some(n) => vec![n],
                None => (2..=6).collect(),
            };
            commands::geometry(&widths, group_size)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            if json {
                match serde_json::to_string_pretty(&out.json) {
                    Ok(s) => println!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::FAILURE;
                    }
                }
            } else {
                print!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
