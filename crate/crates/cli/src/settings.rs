//! Layered configuration: command-line flags over a JSON config file over
//! built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mixquant_core::{I2fMode, PipelineConfig, SalienceMode};
use serde::Deserialize;

use crate::UsageError;

/// Every setting any subcommand reads. All fields are optional so files and
/// flags can be layered.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub model: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
    pub assignment: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub percent: Option<f64>,
    pub group_size: Option<usize>,
    pub act_bits: Option<u8>,
    pub weight_bits: Option<u8>,
    pub salience_mode: Option<SalienceMode>,
    pub i2f: Option<I2fMode>,
    pub tile_m: Option<usize>,
    pub tile_n: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub samples: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub sensitive_layer: Option<usize>,
    pub sensitivity_factor: Option<f64>,
    pub m: Option<u64>,
    pub n: Option<u64>,
    pub k: Option<u64>,
    pub act_bytes: Option<f64>,
    pub weight_bytes: Option<f64>,
    pub repeats: Option<usize>,
}

pub const DEFAULT_PERCENT: f64 = 0.10;
pub const DEFAULT_SAMPLES: usize = 256;
pub const DEFAULT_SENSITIVITY_FACTOR: f64 = 10.0;

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config file {}: {e}", path.display())).into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(DEFAULT_SAMPLES)
    }

    pub fn percent(&self) -> Result<f64> {
        let p = self.percent.unwrap_or(DEFAULT_PERCENT);
        if !(0.0..=1.0).contains(&p) {
            return Err(UsageError(format!("--percent must lie in [0, 1], got {p}")).into());
        }
        Ok(p)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let d = PipelineConfig::default();
        let cfg = PipelineConfig {
            group_size: self.group_size.unwrap_or(d.group_size),
            act_bits: self.act_bits.unwrap_or(d.act_bits),
            weight_bits: self.weight_bits.unwrap_or(d.weight_bits),
            salience_mode: self.salience_mode.unwrap_or(d.salience_mode),
            i2f: self.i2f.unwrap_or(d.i2f),
            tile_m: self.tile_m.unwrap_or(d.tile_m),
            tile_n: self.tile_n.unwrap_or(d.tile_n),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| UsageError(format!("{flag} is required")).into())
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),+ $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $dst.$field = Some(v); } )+
    };
}

fn parse_salience(s: &str) -> Result<SalienceMode, String> {
    match s {
        "aggregated" => Ok(SalienceMode::Aggregated),
        "per-sample" => Ok(SalienceMode::PerSample),
        _ => Err("expected `aggregated` or `per-sample`".into()),
    }
}

fn parse_i2f(s: &str) -> Result<I2fMode, String> {
    match s {
        "native" => Ok(I2fMode::Native),
        "fast" => Ok(I2fMode::Fast),
        _ => Err("expected `native` or `fast`".into()),
    }
}

#[derive(Args, Debug, Default)]
pub struct QuantFlags {
    /// Quantization group size along the input dimension.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Activation bit width.
    #[arg(long)]
    pub act_bits: Option<u8>,
    /// Bit width of non-promoted weight channels.
    #[arg(long)]
    pub weight_bits: Option<u8>,
    /// Integer-to-float conversion in the GEMM engine.
    #[arg(long, value_parser = parse_i2f)]
    pub i2f: Option<I2fMode>,
    #[arg(long)]
    pub tile_m: Option<usize>,
    #[arg(long)]
    pub tile_n: Option<usize>,
}

impl QuantFlags {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, group_size, act_bits, weight_bits, i2f, tile_m, tile_n);
    }
}

#[derive(Args, Debug, Default)]
pub struct SearchFlags {
    /// Fraction of output channels kept at 8 bits, in [0, 1].
    #[arg(long)]
    pub percent: Option<f64>,
    #[arg(long, value_parser = parse_salience)]
    pub salience_mode: Option<SalienceMode>,
    /// Calibration samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SearchFlags {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, percent, salience_mode, samples, seed);
    }
}

#[derive(Args, Debug, Default)]
pub struct GenModelArgs {
    /// Layer widths, input first, e.g. `32,64,64,8`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Index of a linear layer that receives outlier weights.
    #[arg(long)]
    pub sensitive_layer: Option<usize>,
    #[arg(long)]
    pub sensitivity_factor: Option<f64>,
    /// Output model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GenModelArgs {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, dims, seed, sensitive_layer, sensitivity_factor, out);
    }
}

#[derive(Args, Debug, Default)]
pub struct SearchArgs {
    /// Float model directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Assignment JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Distribution report JSON output (default: next to the assignment).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchFlags,
    #[command(flatten)]
    pub quant: QuantFlags,
}

impl SearchArgs {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, model, out, report);
        self.search.apply(s);
        self.quant.apply(s);
    }
}

#[derive(Args, Debug, Default)]
pub struct QuantizeArgs {
    /// Float model directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Assignment JSON from `search`; without it the search runs inline.
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Quantized model output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchFlags,
    #[command(flatten)]
    pub quant: QuantFlags,
}

impl QuantizeArgs {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, model, assignment, out);
        self.search.apply(s);
        self.quant.apply(s);
    }
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Float model directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Quantized model directory.
    #[arg(long)]
    pub quantized: Option<PathBuf>,
    /// Report JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluation samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_i2f)]
    pub i2f: Option<I2fMode>,
    #[arg(long)]
    pub tile_m: Option<usize>,
    #[arg(long)]
    pub tile_n: Option<usize>,
}

impl EvalArgs {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, model, quantized, out, samples, seed, i2f, tile_m, tile_n);
    }
}

#[derive(Args, Debug, Default)]
pub struct BenchArgs {
    #[arg(short = 'm', long)]
    pub m: Option<u64>,
    #[arg(short = 'n', long)]
    pub n: Option<u64>,
    #[arg(short = 'k', long)]
    pub k: Option<u64>,
    /// Fraction of 8-bit weight rows.
    #[arg(long)]
    pub percent: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Timed repetitions after one warm-up run.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Timing JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantFlags,
}

impl BenchArgs {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, m, n, k, percent, seed, repeats, out);
        self.quant.apply(s);
    }
}

#[derive(Args, Debug, Default)]
pub struct AnalyzeArgs {
    #[arg(short = 'm', long)]
    pub m: Option<u64>,
    #[arg(short = 'n', long)]
    pub n: Option<u64>,
    #[arg(short = 'k', long)]
    pub k: Option<u64>,
    /// Activation bytes per element for an extra intensity query.
    #[arg(long)]
    pub act_bytes: Option<f64>,
    /// Weight bytes per element for an extra intensity query.
    #[arg(long)]
    pub weight_bytes: Option<f64>,
    /// Quantized model whose footprint is reported.
    #[arg(long)]
    pub quantized: Option<PathBuf>,
    /// Float model; with `--assignment`, reports the implied footprint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Report JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantFlags,
}

impl AnalyzeArgs {
    pub fn apply(&self, s: &mut Settings) {
        overlay!(s, self, m, n, k, act_bytes, weight_bytes, quantized, model, assignment, out);
        self.quant.apply(s);
    }
}
