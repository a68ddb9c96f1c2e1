//! Analytical models and reports: linear-layer compute intensity, the
//! distribution of promoted channels across layers, and the float-vs-quantized
//! proxy quality metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::{forward_stack, CalibrationSet, LinearStack};
use crate::error::{Error, Result};
use crate::salience::PrecisionAssignment;

/// Shape and element sizes of one linear layer invocation: `M` tokens, `N`
/// output features, `K` input features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityQuery {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub act_bytes: f64,
    pub weight_bytes: f64,
}

impl IntensityQuery {
    pub fn new(m: u64, n: u64, k: u64, act_bytes: f64, weight_bytes: f64) -> Self {
        Self { m, n, k, act_bytes, weight_bytes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(Error::usage("M, N and K must be positive"));
        }
        if !(self.act_bytes > 0.0 && self.weight_bytes > 0.0)
            || !self.act_bytes.is_finite()
            || !self.weight_bytes.is_finite()
        {
            return Err(Error::usage("bytes per element must be positive"));
        }
        Ok(())
    }
}

/// Operations per byte: `2MNK / (MK * B_act + KN * B_weight)`.
pub fn compute_intensity(q: &IntensityQuery) -> Result<f64> {
    q.validate()?;
    let (m, n, k) = (q.m as f64, q.n as f64, q.k as f64);
    Ok(2.0 * m * n * k / bytes_moved(q))
}

fn bytes_moved(q: &IntensityQuery) -> f64 {
    let (m, n, k) = (q.m as f64, q.n as f64, q.k as f64);
    m * k * q.act_bytes + k * n * q.weight_bytes
}

/// Relative intensity change going from `base` to `changed`. For equal
/// shapes the operation counts cancel and the gain is formed from the byte
/// counts alone, so power-of-two byte sizes give exact results.
pub fn intensity_gain(base: &IntensityQuery, changed: &IntensityQuery) -> Result<f64> {
    let (ib, ic) = (compute_intensity(base)?, compute_intensity(changed)?);
    if (base.m, base.n, base.k) == (changed.m, changed.n, changed.k) {
        let (db, dc) = (bytes_moved(base), bytes_moved(changed));
        return Ok((db - dc) / dc);
    }
    Ok(ic / ib - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub name: String,
    pub class: String,
    pub total_channels: usize,
    pub promoted_channels: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub layers: Vec<LayerDistribution>,
    /// Mean of per-layer percents within each layer class.
    pub class_averages: BTreeMap<String, f64>,
    pub global_percent: f64,
}

impl DistributionReport {
    /// Channel-weighted mean of the per-layer percents.
    pub fn weighted_mean(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.total_channels).sum();
        self.layers
            .iter()
            .map(|l| l.percent * l.total_channels as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:<8} {:>8} {:>9} {:>9}\n", "layer", "class", "channels", "promoted", "percent");
        for l in &self.layers {
            s += &format!(
                "{:<12} {:<8} {:>8} {:>9} {:>8.2}%\n",
                l.name,
                l.class,
                l.total_channels,
                l.promoted_channels,
                100.0 * l.percent
            );
        }
        for (class, avg) in &self.class_averages {
            s += &format!("average {class:<20} {:>17.2}%\n", 100.0 * avg);
        }
        s += &format!("global {:>39.2}%\n", 100.0 * self.global_percent);
        s
    }
}

/// `input` for the first linear layer, `head` for the last, `hidden`
/// otherwise.
pub fn class_by_position(index: usize, count: usize) -> String {
    if count > 1 && index + 1 == count {
        "head".into()
    } else if index == 0 {
        "input".into()
    } else {
        "hidden".into()
    }
}

pub fn distribution_report(
    assignment: &PrecisionAssignment,
    out_features: &[usize],
    classify: impl Fn(usize, usize) -> String,
) -> Result<DistributionReport> {
    assignment.validate(out_features)?;
    let count = assignment.layers.len();
    let layers: Vec<LayerDistribution> = assignment
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerDistribution {
            name: l.name.clone(),
            class: classify(i, count),
            total_channels: l.out_features,
            promoted_channels: l.largebit.len(),
            percent: l.promoted_fraction(),
        })
        .collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for l in &layers {
        let e = sums.entry(l.class.clone()).or_default();
        e.0 += l.percent;
        e.1 += 1;
    }
    let total = assignment.total_channels;
    Ok(DistributionReport {
        layers,
        class_averages: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        global_percent: if total == 0 {
            0.0
        } else {
            assignment.n_largebit as f64 / total as f64
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub samples: usize,
    pub float_loss: f64,
    pub quantized_loss: f64,
    /// Mean over samples of `|loss_q - loss_f|`.
    pub loss_delta: f64,
    /// `quantized_loss - float_loss`.
    pub mean_loss_shift: f64,
    /// Mean squared difference of logits.
    pub logit_mse: f64,
}

/// Compare a quantized execution against the float model on `data`.
pub fn proxy_eval(
    float: &impl LinearStack,
    quantized: &impl LinearStack,
    data: &CalibrationSet,
) -> Result<ProxyReport> {
    if float.num_layers() != quantized.num_layers() || float.input_dim() != quantized.input_dim() {
        return Err(Error::shape("float and quantized models differ in architecture"));
    }
    let f = forward_stack(float, data)?;
    let q = forward_stack(quantized, data)?;
    if f.logits.cols() != q.logits.cols() {
        return Err(Error::shape("float and quantized models differ in output width"));
    }
    let n = data.len() as f64;
    let loss_delta = f
        .per_sample_loss
        .iter()
        .zip(&q.per_sample_loss)
        .map(|(a, b)| (b - a).abs())
        .sum::<f64>()
        / n;
    let sq: f64 = f
        .logits
        .as_slice()
        .iter()
        .zip(q.logits.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ProxyReport {
        samples: data.len(),
        float_loss: f.loss,
        quantized_loss: q.loss,
        loss_delta,
        mean_loss_shift: q.loss - f.loss,
        logit_mse: sq / f.logits.as_slice().len() as f64,
    })
}
