//! Global precision search.
//!
//! Every output channel of every linear layer gets a salience: the estimated
//! loss increase from quantizing that channel alone with the small-bit
//! scheme. With `t = g . (c_q - c_0)` the estimate is `|t + t^2 / 2|`: the
//! first-order Taylor term plus the Fisher-approximated second-order term,
//! which collapses to half the square of the same dot product. Channels are
//! then ranked across the whole model in one pass and the top
//! `round(percent * total)` are promoted to the large bit width.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{GradientBundle, ToyModel};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::quant::{QuantScheme, QuantizedTensor};
use crate::rng::PortableRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SalienceMode {
    /// One salience from the mean gradient of the layer.
    #[default]
    Aggregated,
    /// Mean over calibration samples of the per-sample estimate.
    PerSample,
}

/// Gradient information for one output channel.
#[derive(Clone, Copy, Debug)]
pub enum ChannelGradient<'a> {
    Aggregated(&'a [f64]),
    PerSample(&'a [Vec<f64>]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSalience {
    pub layer_id: usize,
    pub channel_id: usize,
    pub salience: f64,
}

#[inline]
fn taylor_estimate(t: f64) -> f64 {
    (t + 0.5 * t * t).abs()
}

pub fn channel_salience(g: ChannelGradient<'_>, delta: &[f64]) -> Result<f64> {
    let check = |len: usize| {
        if len != delta.len() {
            Err(Error::shape(format!(
                "gradient has {len} entries, weight delta has {}",
                delta.len()
            )))
        } else {
            Ok(())
        }
    };
    match g {
        ChannelGradient::Aggregated(g) => {
            check(g.len())?;
            Ok(taylor_estimate(dot(g, delta)))
        }
        ChannelGradient::PerSample(gs) => {
            if gs.is_empty() {
                return Err(Error::usage("per-sample salience needs at least one sample"));
            }
            let mut sum = 0.0;
            for g in gs {
                check(g.len())?;
                sum += taylor_estimate(dot(g, delta));
            }
            Ok(sum / gs.len() as f64)
        }
    }
}

/// `dequantize(quantize(W)) - W` under `scheme`.
pub fn weight_delta(weight: &Matrix, scheme: QuantScheme) -> Result<Matrix> {
    let q = QuantizedTensor::quantize(weight.as_slice(), weight.rows(), weight.cols(), scheme)?;
    let data = q
        .dequantize_f64()
        .into_iter()
        .zip(weight.as_slice())
        .map(|(d, w)| d - w)
        .collect();
    Matrix::from_vec(weight.rows(), weight.cols(), data)
}

/// Salience of every output channel, in layer then channel order.
pub fn all_channel_saliences(
    model: &ToyModel,
    gradients: &GradientBundle,
    small_scheme: QuantScheme,
    mode: SalienceMode,
) -> Result<Vec<ChannelSalience>> {
    if gradients.aggregated.len() != model.num_layers() {
        return Err(Error::shape(format!(
            "{} gradient matrices for {} layers",
            gradients.aggregated.len(),
            model.num_layers()
        )));
    }
    for (i, (w, g)) in model.weights().iter().zip(&gradients.aggregated).enumerate() {
        if (w.rows(), w.cols()) != (g.rows(), g.cols()) {
            return Err(Error::shape(format!(
                "layer {i}: weight is {}x{} but gradient is {}x{}",
                w.rows(),
                w.cols(),
                g.rows(),
                g.cols()
            )));
        }
    }
    let per_sample = match mode {
        SalienceMode::Aggregated => None,
        SalienceMode::PerSample => Some(gradients.per_sample.as_ref().ok_or_else(|| {
            Error::usage("per-sample salience requires per-sample gradients")
        })?),
    };
    let layers: Vec<Vec<ChannelSalience>> = model
        .weights()
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let delta = weight_delta(w, small_scheme)?;
            (0..w.rows())
                .map(|c| {
                    let salience = match per_sample {
                        None => channel_salience(
                            ChannelGradient::Aggregated(gradients.aggregated[i].row(c)),
                            delta.row(c),
                        )?,
                        Some(ps) => {
                            let rows: Vec<Vec<f64>> = (0..ps.num_samples())
                                .map(|d| ps.channel_row(i, d, c))
                                .collect();
                            channel_salience(ChannelGradient::PerSample(&rows), delta.row(c))?
                        }
                    };
                    Ok(ChannelSalience {
                        layer_id: i,
                        channel_id: c,
                        salience,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(layers.into_iter().flatten().collect())
}

/// Descending salience; equal saliences keep (layer, channel) ascending.
pub fn rank_descending(saliences: &mut [ChannelSalience]) {
    saliences.sort_by(|a, b| {
        b.salience
            .partial_cmp(&a.salience)
            .unwrap_or(Ordering::Equal)
            .then(a.layer_id.cmp(&b.layer_id))
            .then(a.channel_id.cmp(&b.channel_id))
    });
}

/// `round(percent * total)`, halves rounded up.
pub fn largebit_budget(percent: f64, total: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&percent) {
        return Err(Error::usage(format!("percent must lie in [0, 1], got {percent}")));
    }
    Ok(((percent * total as f64).round() as usize).min(total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer_id: usize,
    pub name: String,
    pub out_features: usize,
    /// Promoted channel indices, ascending.
    pub largebit: Vec<usize>,
    /// Remaining channel indices, ascending.
    pub smallbit: Vec<usize>,
}

impl LayerAssignment {
    pub fn promoted_fraction(&self) -> f64 {
        self.largebit.len() as f64 / self.out_features as f64
    }
}

/// Partition of all output channels into large-bit and small-bit sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAssignment {
    pub percent: f64,
    pub n_largebit: usize,
    pub total_channels: usize,
    pub salience_mode: Option<SalienceMode>,
    pub layers: Vec<LayerAssignment>,
}

impl PrecisionAssignment {
    /// Build from the set of promoted `(layer, channel)` pairs.
    pub fn from_promoted(
        percent: f64,
        layer_sizes: &[(String, usize)],
        promoted: impl IntoIterator<Item = (usize, usize)>,
        mode: Option<SalienceMode>,
    ) -> Result<Self> {
        let mut flags: Vec<Vec<bool>> = layer_sizes.iter().map(|(_, n)| vec![false; *n]).collect();
        let mut n_largebit = 0;
        for (l, c) in promoted {
            let slot = flags
                .get_mut(l)
                .and_then(|f| f.get_mut(c))
                .ok_or_else(|| Error::shape(format!("channel ({l}, {c}) does not exist")))?;
            if std::mem::replace(slot, true) {
                return Err(Error::data(format!("channel ({l}, {c}) promoted twice")));
            }
            n_largebit += 1;
        }
        let layers = layer_sizes
            .iter()
            .zip(flags)
            .enumerate()
            .map(|(i, ((name, n), f))| LayerAssignment {
                layer_id: i,
                name: name.clone(),
                out_features: *n,
                largebit: (0..*n).filter(|&c| f[c]).collect(),
                smallbit: (0..*n).filter(|&c| !f[c]).collect(),
            })
            .collect();
        Ok(Self {
            percent,
            n_largebit,
            total_channels: layer_sizes.iter().map(|(_, n)| n).sum(),
            salience_mode: mode,
            layers,
        })
    }

    /// Checks the partition against the model's layer widths.
    pub fn validate(&self, out_features: &[usize]) -> Result<()> {
        if self.layers.len() != out_features.len() {
            return Err(Error::shape(format!(
                "assignment covers {} layers, model has {}",
                self.layers.len(),
                out_features.len()
            )));
        }
        let mut promoted = 0;
        for (i, (l, &n)) in self.layers.iter().zip(out_features).enumerate() {
            if l.layer_id != i || l.out_features != n {
                return Err(Error::shape(format!(
                    "assignment layer {i} does not match a {n}-channel layer"
                )));
            }
            check_partition(&l.largebit, &l.smallbit, n)
                .map_err(|e| Error::data(format!("layer `{}`: {e}", l.name)))?;
            promoted += l.largebit.len();
        }
        if promoted != self.n_largebit || self.total_channels != out_features.iter().sum::<usize>() {
            return Err(Error::data("assignment totals are inconsistent"));
        }
        Ok(())
    }

    pub fn is_largebit(&self, layer: usize, channel: usize) -> bool {
        self.layers[layer].largebit.binary_search(&channel).is_ok()
    }
}

/// Two sorted index lists partition `0..n`.
pub fn check_partition(a: &[usize], b: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in a.iter().chain(b) {
        match seen.get_mut(i) {
            None => return Err(Error::data(format!("index {i} out of range 0..{n}"))),
            Some(s) if *s => return Err(Error::data(format!("index {i} listed twice"))),
            Some(s) => *s = true,
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::data(format!("index {i} not assigned")));
    }
    if a.windows(2).any(|w| w[0] >= w[1]) || b.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::data("index lists must be ascending"));
    }
    Ok(())
}

/// Promote the first `round(percent * len)` channels of a ranked list.
pub fn select_top(
    ranked: &[ChannelSalience],
    percent: f64,
    layer_sizes: &[(String, usize)],
    mode: Option<SalienceMode>,
) -> Result<PrecisionAssignment> {
    let total: usize = layer_sizes.iter().map(|(_, n)| n).sum();
    if ranked.len() != total {
        return Err(Error::shape(format!(
            "{} ranked channels for a model with {total}",
            ranked.len()
        )));
    }
    let n = largebit_budget(percent, total)?;
    PrecisionAssignment::from_promoted(
        percent,
        layer_sizes,
        ranked[..n].iter().map(|c| (c.layer_id, c.channel_id)),
        mode,
    )
}

pub fn layer_sizes(model: &ToyModel) -> Vec<(String, usize)> {
    model
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w)| (format!("fc{i}"), w.rows()))
        .collect()
}

/// One-pass global search over all output channels of `model`.
pub fn global_search(
    model: &ToyModel,
    gradients: &GradientBundle,
    small_scheme: QuantScheme,
    percent: f64,
    mode: SalienceMode,
) -> Result<PrecisionAssignment> {
    largebit_budget(percent, 0)?;
    let mut saliences = all_channel_saliences(model, gradients, small_scheme, mode)?;
    rank_descending(&mut saliences);
    select_top(&saliences, percent, &layer_sizes(model), Some(mode))
}

/// Same budget as the global search, channels drawn uniformly at random.
pub fn random_assignment(
    layer_sizes: &[(String, usize)],
    percent: f64,
    seed: u64,
) -> Result<PrecisionAssignment> {
    let mut all: Vec<(usize, usize)> = layer_sizes
        .iter()
        .enumerate()
        .flat_map(|(l, (_, n))| (0..*n).map(move |c| (l, c)))
        .collect();
    let n = largebit_budget(percent, all.len())?;
    PortableRng::new(seed).shuffle(&mut all);
    PrecisionAssignment::from_promoted(percent, layer_sizes, all.into_iter().take(n), None)
}
