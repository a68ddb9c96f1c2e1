//! Desk-scale stand-in for the model being quantized: a ReLU MLP with a
//! cross-entropy head, its analytic gradients, and a synthetic calibration
//! set.
//!
//! All arithmetic is f64. Per-sample work may run on the rayon pool; every
//! reduction over samples is performed in sample order, so results do not
//! depend on the number of workers.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::PortableRng;
use crate::tensor_store::{
    DenseTensor, Dtype, LayerEntry, LayerKind, ModelManifest, StoredModel, TensorEntry,
};

pub const DEFAULT_DIMS: [usize; 4] = [32, 64, 64, 8];

const STREAM_WEIGHTS: u64 = 1;
const STREAM_OUTLIERS: u64 = 2;
const STREAM_INPUTS: u64 = 3;
const STREAM_TEACHER: u64 = 4;

/// Makes one layer harder to quantize: in every output channel of `layer`
/// one weight (column drawn from the seed) becomes an outlier of magnitude
/// `factor` times the row's largest |w|, keeping its sign. The row's
/// quantization range widens by about `factor`, so all of its other weights
/// round that much more coarsely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub layer: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    /// `out_features x in_features` per linear layer.
    weights: Vec<Matrix>,
}

impl ToyModel {
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::shape("model needs at least one linear layer"));
        }
        for (i, pair) in weights.windows(2).enumerate() {
            if pair[0].rows() != pair[1].cols() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].rows(),
                    i + 1,
                    pair[1].cols()
                )));
            }
        }
        if weights.iter().any(|w| w.rows() == 0 || w.cols() == 0) {
            return Err(Error::shape("layers need nonzero widths"));
        }
        if let Some(x) = weights.iter().flat_map(|w| w.as_slice()).find(|x| !x.is_finite()) {
            return Err(Error::data(format!("non-finite weight {x}")));
        }
        Ok(Self { weights })
    }

    /// He-initialized MLP over `dims = [input, hidden..., classes]`.
    pub fn random(dims: &[usize], seed: u64, sensitivity: Option<Sensitivity>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::usage(format!(
                "dims must list at least input and class counts, all >= 1; got {dims:?}"
            )));
        }
        let n_layers = dims.len() - 1;
        if let Some(s) = sensitivity {
            if s.layer >= n_layers {
                return Err(Error::usage(format!(
                    "sensitive layer {} does not exist ({n_layers} layers)",
                    s.layer
                )));
            }
            if !(s.factor.is_finite() && s.factor > 0.0) {
                return Err(Error::usage("sensitivity factor must be positive"));
            }
        }
        let mut rng = PortableRng::derived(seed, STREAM_WEIGHTS);
        let mut weights = Vec::with_capacity(n_layers);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
        }
        if let Some(s) = sensitivity {
            let mut rng = PortableRng::derived(seed, STREAM_OUTLIERS);
            let w = &mut weights[s.layer];
            for r in 0..w.rows() {
                let c = rng.below(w.cols() as u64) as usize;
                let amax = w.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let sign = if w.get(r, c) < 0.0 { -1.0 } else { 1.0 };
                w.set(r, c, sign * s.factor * amax);
            }
        }
        Self::new(weights)
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn num_classes(&self) -> usize {
        self.weights[self.weights.len() - 1].rows()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.weights.iter().map(Matrix::rows))
            .collect()
    }

    pub fn total_channels(&self) -> usize {
        self.weights.iter().map(Matrix::rows).sum()
    }

    /// Manifest + tensors: `fcN` linear layers with `reluN` between them.
    pub fn to_stored(&self, name: &str, metadata: BTreeMap<String, String>) -> StoredModel {
        let mut layers = Vec::new();
        let mut entries = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        let last = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            let tname = format!("fc{i}.weight");
            layers.push(LayerEntry {
                name: format!("fc{i}"),
                kind: LayerKind::Linear,
                in_features: w.cols(),
                out_features: w.rows(),
                tensors: BTreeMap::from([("weight".to_string(), tname.clone())]),
            });
            if i != last {
                layers.push(LayerEntry {
                    name: format!("relu{i}"),
                    kind: LayerKind::ActivationFn,
                    in_features: w.rows(),
                    out_features: w.rows(),
                    tensors: BTreeMap::new(),
                });
            }
            entries.insert(
                tname.clone(),
                TensorEntry {
                    file: format!("{tname}.bin"),
                    dtype: Dtype::F64,
                    shape: vec![w.rows(), w.cols()],
                },
            );
            let t = DenseTensor::from_f64(vec![w.rows(), w.cols()], w.as_slice().to_vec())
                .expect("matrix shape is consistent");
            tensors.insert(tname, t);
        }
        let mut metadata = metadata;
        metadata.insert("architecture".into(), "relu-mlp".into());
        StoredModel {
            manifest: ModelManifest {
                name: name.to_string(),
                layers,
                tensors: entries,
                metadata,
            },
            tensors,
        }
    }

    pub fn from_stored(stored: &StoredModel) -> Result<Self> {
        let mut weights = Vec::new();
        for layer in stored.manifest.linear_layers() {
            let t = stored.layer_tensor(layer, "weight")?;
            let (rows, cols) = t.matrix_dims()?;
            if (rows, cols) != (layer.out_features, layer.in_features) {
                return Err(Error::shape(format!(
                    "layer `{}` weight is {rows}x{cols}, expected {}x{}",
                    layer.name, layer.out_features, layer.in_features
                )));
            }
            let data = t.to_f64_vec().ok_or_else(|| {
                Error::data(format!("layer `{}` weight must be real-valued", layer.name))
            })?;
            weights.push(Matrix::from_vec(rows, cols, data)?);
        }
        Self::new(weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Sample>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::usage("calibration set must not be empty"));
        }
        let d = samples[0].input.len();
        if samples.iter().any(|s| s.input.len() != d) {
            return Err(Error::shape("calibration inputs differ in dimension"));
        }
        Ok(Self { samples, seed })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].input.len()
    }

    pub fn inputs(&self) -> Matrix {
        let d = self.input_dim();
        Matrix::from_vec(
            self.len(),
            d,
            self.samples.iter().flat_map(|s| s.input.iter().copied()).collect(),
        )
        .expect("inputs share a dimension")
    }

    pub fn targets(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.target).collect()
    }
}

/// Standard-normal inputs labelled by a fixed random linear teacher:
/// `target = argmax(T x)` with `T` drawn from the same seed.
pub fn make_synthetic_dataset(
    input_dim: usize,
    num_classes: usize,
    num_samples: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if num_samples == 0 {
        return Err(Error::usage("num_samples must be >= 1"));
    }
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::usage("dataset dimensions must be >= 1"));
    }
    let mut trng = PortableRng::derived(seed, STREAM_TEACHER);
    let teacher: Vec<f64> = (0..num_classes * input_dim).map(|_| trng.normal()).collect();
    let mut rng = PortableRng::derived(seed, STREAM_INPUTS);
    let samples = (0..num_samples)
        .map(|_| {
            let input: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
            let target = argmax(
                teacher
                    .chunks(input_dim)
                    .map(|row| dot(row, &input)),
            );
            Sample { input, target }
        })
        .collect();
    CalibrationSet::new(samples, seed)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Input to each linear layer (`batch x in_features`); entry 0 is the
    /// batch itself.
    pub layer_inputs: Vec<Matrix>,
    /// Output of each linear layer before the nonlinearity.
    pub pre_activations: Vec<Matrix>,
    pub logits: Matrix,
    pub per_sample_loss: Vec<f64>,
    pub loss: f64,
}

/// Cross-entropy of one logit row, computed with the max-shift.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Forward pass where `apply(i, input)` computes linear layer `i`. Used both
/// for the float model and for quantized execution.
pub fn forward_with(
    num_layers: usize,
    inputs: &Matrix,
    targets: &[usize],
    mut apply: impl FnMut(usize, &Matrix) -> Result<Matrix>,
) -> Result<ForwardOutput> {
    if targets.len() != inputs.rows() {
        return Err(Error::shape(format!(
            "{} targets for {} inputs",
            targets.len(),
            inputs.rows()
        )));
    }
    let mut layer_inputs = Vec::with_capacity(num_layers);
    let mut pre_activations = Vec::with_capacity(num_layers);
    let mut a = inputs.clone();
    for i in 0..num_layers {
        let z = apply(i, &a)?;
        let next = if i + 1 < num_layers {
            z.map(|v| v.max(0.0))
        } else {
            z.clone()
        };
        layer_inputs.push(std::mem::replace(&mut a, next));
        pre_activations.push(z);
    }
    let logits = a;
    let mut per_sample_loss = Vec::with_capacity(targets.len());
    for (row, &t) in logits.row_iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::data(format!("target {t} out of {} classes", row.len())));
        }
        per_sample_loss.push(cross_entropy(row, t));
    }
    let loss = per_sample_loss.iter().sum::<f64>() / per_sample_loss.len() as f64;
    Ok(ForwardOutput {
        layer_inputs,
        pre_activations,
        logits,
        per_sample_loss,
        loss,
    })
}

/// A chain of linear layers with ReLU between them, executed one layer at a
/// time. Implemented by the float model and by quantized models.
pub trait LinearStack {
    fn num_layers(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn apply_layer(&self, index: usize, input: &Matrix) -> Result<Matrix>;
}

impl LinearStack for ToyModel {
    fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    fn apply_layer(&self, index: usize, input: &Matrix) -> Result<Matrix> {
        input.mul_transposed(&self.weights[index])
    }
}

pub fn forward_stack(stack: &impl LinearStack, data: &CalibrationSet) -> Result<ForwardOutput> {
    if data.input_dim() != stack.input_dim() {
        return Err(Error::shape(format!(
            "dataset has {} features, model expects {}",
            data.input_dim(),
            stack.input_dim()
        )));
    }
    forward_with(stack.num_layers(), &data.inputs(), &data.targets(), |i, a| {
        stack.apply_layer(i, a)
    })
}

pub fn forward(model: &ToyModel, inputs: &Matrix, targets: &[usize]) -> Result<ForwardOutput> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::shape(format!(
            "input has {} features, model expects {}",
            inputs.cols(),
            model.input_dim()
        )));
    }
    forward_with(model.num_layers(), inputs, targets, |i, a| {
        a.mul_transposed(&model.weights[i])
    })
}

pub fn forward_dataset(model: &ToyModel, data: &CalibrationSet) -> Result<ForwardOutput> {
    forward(model, &data.inputs(), &data.targets())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Aggregated,
    PerSample,
}

/// Per-sample weight gradients in factored form: the gradient of sample `d`
/// for layer `i` is the outer product `deltas[i].row(d) (x) inputs[i].row(d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGradients {
    /// `samples x out_features` per layer: dLoss_d / dz.
    pub deltas: Vec<Matrix>,
    /// `samples x in_features` per layer.
    pub inputs: Vec<Matrix>,
}

impl PerSampleGradients {
    pub fn num_samples(&self) -> usize {
        self.deltas[0].rows()
    }

    /// `g_d` for output channel `channel` of `layer`.
    pub fn channel_row(&self, layer: usize, sample: usize, channel: usize) -> Vec<f64> {
        let d = self.deltas[layer].get(sample, channel);
        self.inputs[layer].row(sample).iter().map(|&x| d * x).collect()
    }

    /// Full weight gradient of one sample.
    pub fn full(&self, layer: usize, sample: usize) -> Matrix {
        let delta = self.deltas[layer].row(sample);
        let input = self.inputs[layer].row(sample);
        let data = delta
            .iter()
            .flat_map(|&d| input.iter().map(move |&x| d * x))
            .collect();
        Matrix::from_vec(delta.len(), input.len(), data).expect("outer product shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    /// Mean over samples of dLoss/dW, one per layer, shaped like W.
    pub aggregated: Vec<Matrix>,
    pub per_sample: Option<PerSampleGradients>,
}

/// Analytic gradients of the mean cross-entropy over `data`.
pub fn compute_gradients(
    model: &ToyModel,
    data: &CalibrationSet,
    mode: GradientMode,
) -> Result<GradientBundle> {
    if data.input_dim() != model.input_dim() {
        return Err(Error::shape(format!(
            "dataset has {} features, model expects {}",
            data.input_dim(),
            model.input_dim()
        )));
    }
    let n_layers = model.num_layers();
    // Per-sample backward passes are independent; collect keeps sample order.
    let per_sample: Vec<SampleBackward> = data
        .samples
        .par_iter()
        .map(|s| backward_one(model, s))
        .collect::<Result<_>>()?;

    let n = data.len();
    let mut deltas = Vec::with_capacity(n_layers);
    let mut inputs = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let w = &model.weights[i];
        let d = per_sample.iter().flat_map(|(d, _)| d[i].iter().copied()).collect();
        let x = per_sample.iter().flat_map(|(_, x)| x[i].iter().copied()).collect();
        deltas.push(Matrix::from_vec(n, w.rows(), d)?);
        inputs.push(Matrix::from_vec(n, w.cols(), x)?);
    }

    let aggregated = (0..n_layers)
        .map(|i| {
            let (rows, cols) = (model.weights[i].rows(), model.weights[i].cols());
            let (dl, xl) = (&deltas[i], &inputs[i]);
            let data: Vec<f64> = (0..rows)
                .into_par_iter()
                .flat_map_iter(|r| {
                    let mut acc = vec![0.0; cols];
                    for s in 0..n {
                        let d = dl.get(s, r);
                        for (a, &x) in acc.iter_mut().zip(xl.row(s)) {
                            *a += d * x;
                        }
                    }
                    acc.into_iter().map(move |a| a / n as f64)
                })
                .collect();
            Matrix::from_vec(rows, cols, data)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GradientBundle {
        aggregated,
        per_sample: (mode == GradientMode::PerSample).then_some(PerSampleGradients { deltas, inputs }),
    })
}

/// Per-layer dLoss/dz and per-layer input of one sample.
type SampleBackward = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn backward_one(model: &ToyModel, s: &Sample) -> Result<SampleBackward> {
    let n_layers = model.num_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut a = s.input.clone();
    for (i, w) in model.weights.iter().enumerate() {
        let z: Vec<f64> = w.row_iter().map(|row| dot(row, &a)).collect();
        let next = if i + 1 < n_layers {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    if s.target >= a.len() {
        return Err(Error::data(format!("target {} out of {} classes", s.target, a.len())));
    }
    let mut delta = softmax(&a);
    delta[s.target] -= 1.0;
    let mut deltas = vec![Vec::new(); n_layers];
    for i in (0..n_layers).rev() {
        if i > 0 {
            let w = &model.weights[i];
            let mut prev = vec![0.0; w.cols()];
            for (r, &d) in delta.iter().enumerate() {
                for (p, &wv) in prev.iter_mut().zip(w.row(r)) {
                    *p += wv * d;
                }
            }
            for (p, &z) in prev.iter_mut().zip(&pre[i - 1]) {
                if z <= 0.0 {
                    *p = 0.0;
                }
            }
            deltas[i] = std::mem::replace(&mut delta, prev);
        } else {
            deltas[0] = std::mem::take(&mut delta);
        }
    }
    Ok((deltas, inputs))
}
