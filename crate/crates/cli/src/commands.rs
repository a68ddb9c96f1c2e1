use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mixquant_core::analysis::{class_by_position, compute_intensity, intensity_gain};
use mixquant_core::calibration::DEFAULT_DIMS;
use mixquant_core::mixed_layer::partition_matrix;
use mixquant_core::pipeline::QUANTIZED_FORMAT;
use mixquant_core::rng::PortableRng;
use mixquant_core::salience::layer_sizes;
use mixquant_core::{
    distribution_report, execute_prepared, load_model, memory_footprint, proxy_eval,
    quantize_model, random_assignment, save_model, search_model, DatasetSpec, IntensityQuery,
    Matrix, PrecisionAssignment, PreparedLayer, QuantizedModel, Sensitivity, StoredModel,
    ToyModel,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::settings::{Settings, DEFAULT_SENSITIVITY_FACTOR};
use crate::UsageError;

fn lexical(path: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

/// An output may not coincide with, or contain, any input.
fn ensure_distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let o = lexical(out)?;
    for input in inputs {
        let i = lexical(input)?;
        if i.starts_with(&o) {
            return Err(UsageError(format!(
                "output {} would overwrite input {}",
                out.display(),
                input.display()
            ))
            .into());
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_assignment(path: &Path) -> Result<PrecisionAssignment> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing assignment {}", path.display()))
}

fn load_float(path: &Path) -> Result<(StoredModel, ToyModel)> {
    let stored = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    if stored.manifest.metadata.get("format").map(String::as_str) == Some(QUANTIZED_FORMAT) {
        return Err(mixquant_core::Error::data(format!(
            "{} is a quantized model; a float model is required",
            path.display()
        ))
        .into());
    }
    let model = ToyModel::from_stored(&stored)
        .with_context(|| format!("reading model {}", path.display()))?;
    Ok((stored, model))
}

pub fn gen_model(s: &Settings) -> Result<()> {
    let out = Settings::require(&s.out, "--out")?;
    let dims = s.dims.clone().unwrap_or_else(|| DEFAULT_DIMS.to_vec());
    let sensitivity = match (s.sensitive_layer, s.sensitivity_factor) {
        (Some(layer), f) => Some(Sensitivity {
            layer,
            factor: f.unwrap_or(DEFAULT_SENSITIVITY_FACTOR),
        }),
        (None, Some(_)) => {
            return Err(UsageError("--sensitivity-factor needs --sensitive-layer".into()).into())
        }
        (None, None) => None,
    };
    let model = ToyModel::random(&dims, s.seed(), sensitivity)?;
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), s.seed().to_string());
    if let Some(sens) = sensitivity {
        meta.insert("sensitive_layer".into(), sens.layer.to_string());
        meta.insert("sensitivity_factor".into(), sens.factor.to_string());
    }
    let stored = model.to_stored("toy-mlp", meta);
    save_model(&stored.manifest, &stored.tensors, out)?;
    println!(
        "wrote model {:?} ({} output channels) to {}",
        model.dims(),
        model.total_channels(),
        out.display()
    );
    Ok(())
}

pub fn search(s: &Settings) -> Result<()> {
    let model_dir = Settings::require(&s.model, "--model")?;
    let out = Settings::require(&s.out, "--out")?;
    let report_path = s
        .report
        .clone()
        .unwrap_or_else(|| out.with_extension("report.json"));
    let percent = s.percent()?;
    let cfg = s.pipeline()?;
    ensure_distinct(out, &[model_dir])?;
    ensure_distinct(&report_path, &[model_dir, out])?;
    ensure_distinct(out, &[&report_path])?;

    let (_, model) = load_float(model_dir)?;
    let data = DatasetSpec {
        samples: s.samples(),
        seed: s.seed(),
    }
    .build(&model)?;
    let assignment = search_model(&model, &data, &cfg, percent)?;
    let out_features: Vec<usize> = model.weights().iter().map(Matrix::rows).collect();
    let report = distribution_report(&assignment, &out_features, class_by_position)?;

    write_json(out, &assignment)?;
    write_json(&report_path, &report)?;
    print!("{}", report.to_table());
    println!(
        "promoted {} of {} channels; assignment in {}",
        assignment.n_largebit,
        assignment.total_channels,
        out.display()
    );
    Ok(())
}

pub fn quantize(s: &Settings) -> Result<()> {
    let model_dir = Settings::require(&s.model, "--model")?;
    let out = Settings::require(&s.out, "--out")?;
    let cfg = s.pipeline()?;
    let mut inputs: Vec<&Path> = vec![model_dir];
    if let Some(a) = &s.assignment {
        inputs.push(a);
    }
    ensure_distinct(out, &inputs)?;
    let percent = s.percent()?;

    let (stored, model) = load_float(model_dir)?;
    let assignment = match &s.assignment {
        Some(path) => read_assignment(path)?,
        None => {
            let data = DatasetSpec {
                samples: s.samples(),
                seed: s.seed(),
            }
            .build(&model)?;
            search_model(&model, &data, &cfg, percent)?
        }
    };
    let q = quantize_model(&model, &assignment, &cfg)
        .with_context(|| format!("quantizing {}", model_dir.display()))?;
    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), stored.manifest.name.clone());
    meta.insert("percent".to_string(), assignment.percent.to_string());
    meta.insert("n_largebit".to_string(), assignment.n_largebit.to_string());
    let qs = q.to_stored(&format!("{}-mixed", stored.manifest.name), meta)?;
    save_model(&qs.manifest, &qs.tensors, out)?;
    let fp = q.footprint();
    println!(
        "wrote quantized model to {} ({} of {} channels at 8 bits, {:.3} payload bits per weight)",
        out.display(),
        assignment.n_largebit,
        assignment.total_channels,
        fp.effective_bits
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    seed: u64,
    i2f: mixquant_core::I2fMode,
    proxy: mixquant_core::ProxyReport,
    footprint: mixquant_core::FootprintReport,
}

pub fn eval(s: &Settings) -> Result<()> {
    let model_dir = Settings::require(&s.model, "--model")?;
    let q_dir = Settings::require(&s.quantized, "--quantized")?;
    let cfg = s.pipeline()?;
    if let Some(out) = &s.out {
        ensure_distinct(out, &[model_dir, q_dir])?;
    }
    let (_, model) = load_float(model_dir)?;
    let qs = load_model(q_dir).with_context(|| format!("loading model {}", q_dir.display()))?;
    let q = QuantizedModel::from_stored(&qs, cfg.tile_m, cfg.tile_n, cfg.i2f)
        .with_context(|| format!("reading quantized model {}", q_dir.display()))?;
    // Held out from the calibration samples drawn with the same seed.
    let seed = s.seed().wrapping_add(1);
    let data = DatasetSpec {
        samples: s.samples(),
        seed,
    }
    .build(&model)?;
    let proxy = proxy_eval(&model, &q, &data)?;
    let report = EvalReport {
        samples: data.len(),
        seed,
        i2f: cfg.i2f,
        proxy,
        footprint: q.footprint(),
    };
    if let Some(out) = &s.out {
        write_json(out, &report)?;
    }
    let p = &report.proxy;
    println!("samples          {}", p.samples);
    println!("float loss       {:.6}", p.float_loss);
    println!("quantized loss   {:.6}", p.quantized_loss);
    println!("loss delta       {:.6e}", p.loss_delta);
    println!("mean loss shift  {:+.6e}", p.mean_loss_shift);
    println!("logit mse        {:.6e}", p.logit_mse);
    println!("bits per weight  {:.4}", report.footprint.effective_bits);
    Ok(())
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct BenchReport {
    M: u64,
    N: u64,
    K: u64,
    config: serde_json::Value,
    wall_time: f64,
    effective_gops: f64,
    checksum: String,
}

pub fn bench(s: &Settings) -> Result<()> {
    let (m, n, k) = (s.m.unwrap_or(64), s.n.unwrap_or(1024), s.k.unwrap_or(1024));
    if m == 0 || n == 0 || k == 0 {
        return Err(UsageError("M, N and K must be >= 1".into()).into());
    }
    let repeats = s.repeats.unwrap_or(3);
    if repeats == 0 {
        return Err(UsageError("--repeats must be >= 1".into()).into());
    }
    let percent = s.percent()?;
    let cfg = s.pipeline()?;
    let (m, n, k) = (m as usize, n as usize, k as usize);

    let mut rng = PortableRng::new(s.seed());
    let w = Matrix::from_vec(n, k, (0..n * k).map(|_| 0.05 * rng.normal()).collect())?;
    let a: Vec<f32> = (0..m * k).map(|_| rng.normal() as f32).collect();
    let assignment = random_assignment(&[("bench".to_string(), n)], percent, s.seed())?;
    let layer = partition_matrix("bench", &w, &assignment.layers[0], &cfg.schemes()?)?;
    let prepared = PreparedLayer::new(layer, cfg.tile())?;
    let act = cfg.act_scheme()?;

    let mut y = execute_prepared(&a, m, &prepared, &act, cfg.i2f)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let t = Instant::now();
        y = execute_prepared(&a, m, &prepared, &act, cfg.i2f)?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    let bytes: Vec<u8> = y.iter().flat_map(|v| v.to_le_bytes()).collect();
    let report = BenchReport {
        M: m as u64,
        N: n as u64,
        K: k as u64,
        config: serde_json::json!({
            "pipeline": cfg,
            "percent": percent,
            "seed": s.seed(),
            "repeats": repeats,
            "workers": rayon::current_num_threads(),
        }),
        wall_time: best,
        effective_gops: 2.0 * (m * n * k) as f64 / best / 1e9,
        checksum: hex::encode(Sha256::digest(&bytes)),
    };
    if let Some(out) = &s.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct IntensityRow {
    label: String,
    act_bytes: f64,
    weight_bytes: f64,
    intensity: f64,
    gain_vs_w8a8: f64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    m: u64,
    n: u64,
    k: u64,
    intensity: Vec<IntensityRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    footprint: Option<mixquant_core::FootprintReport>,
}

pub fn analyze(s: &Settings) -> Result<()> {
    let (m, n, k) = (s.m.unwrap_or(512), s.n.unwrap_or(4096), s.k.unwrap_or(4096));
    let cfg = s.pipeline()?;
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(s.quantized.as_deref());
    inputs.extend(s.model.as_deref());
    inputs.extend(s.assignment.as_deref());
    if let Some(out) = &s.out {
        ensure_distinct(out, &inputs)?;
    }
    let base = IntensityQuery::new(m, n, k, 1.0, 1.0);
    let mut queries = vec![
        ("W8A8".to_string(), 1.0, 1.0),
        ("W4A8".to_string(), 1.0, 0.5),
        ("W8A4".to_string(), 0.5, 1.0),
        ("W4A4".to_string(), 0.5, 0.5),
    ];
    if s.act_bytes.is_some() || s.weight_bytes.is_some() {
        let (ab, wb) = (s.act_bytes.unwrap_or(1.0), s.weight_bytes.unwrap_or(1.0));
        queries.push((format!("custom({ab},{wb})"), ab, wb));
    }
    let intensity = queries
        .into_iter()
        .map(|(label, ab, wb)| {
            let q = IntensityQuery::new(m, n, k, ab, wb);
            Ok(IntensityRow {
                label,
                act_bytes: ab,
                weight_bytes: wb,
                intensity: compute_intensity(&q)?,
                gain_vs_w8a8: intensity_gain(&base, &q)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let footprint = match (&s.quantized, &s.model, &s.assignment) {
        (Some(q), _, _) => {
            let qs = load_model(q).with_context(|| format!("loading model {}", q.display()))?;
            Some(QuantizedModel::from_stored(&qs, cfg.tile_m, cfg.tile_n, cfg.i2f)?.footprint())
        }
        (None, Some(model), Some(a)) => {
            let (_, model) = load_float(model)?;
            let assignment = read_assignment(a)?;
            let out: Vec<usize> = layer_sizes(&model).iter().map(|(_, n)| *n).collect();
            assignment.validate(&out)?;
            let ins: Vec<usize> = model.weights().iter().map(Matrix::cols).collect();
            Some(memory_footprint(&assignment, &ins, &cfg.schemes()?)?)
        }
        (None, Some(_), None) | (None, None, Some(_)) => {
            return Err(UsageError("--model and --assignment must be given together".into()).into())
        }
        (None, None, None) => None,
    };

    let report = AnalyzeReport {
        m,
        n,
        k,
        intensity,
        footprint,
    };
    if let Some(out) = &s.out {
        write_json(out, &report)?;
    }
    println!("compute intensity at M={m}, N={n}, K={k}");
    println!("{:<16} {:>9} {:>9} {:>12} {:>10}", "config", "act B", "weight B", "ops/byte", "vs W8A8");
    for r in &report.intensity {
        println!(
            "{:<16} {:>9} {:>9} {:>12.3} {:>+9.2}%",
            r.label,
            r.act_bytes,
            r.weight_bytes,
            r.intensity,
            100.0 * r.gain_vs_w8a8
        );
    }
    if let Some(fp) = &report.footprint {
        println!();
        println!("{:<12} {:>10} {:>10} {:>10} {:>10}", "layer", "8-bit w", "4-bit w", "bits/w", "w/ scales");
        for l in &fp.layers {
            println!(
                "{:<12} {:>10} {:>10} {:>10.4} {:>10.4}",
                l.name, l.large_weights, l.small_weights, l.effective_bits, l.effective_bits_with_overhead
            );
        }
        println!(
            "{:<12} {:>10} {:>10} {:>10.4} {:>10.4}",
            "total",
            fp.layers.iter().map(|l| l.large_weights).sum::<u64>(),
            fp.layers.iter().map(|l| l.small_weights).sum::<u64>(),
            fp.effective_bits,
            fp.effective_bits_with_overhead
        );
    }
    Ok(())
}
