//! End-to-end plumbing: configuration, search, quantization of a whole toy
//! model, and the on-disk format of quantized models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    compute_gradients, make_synthetic_dataset, CalibrationSet, GradientMode, LinearStack, ToyModel,
};
use crate::error::{Error, Result};
use crate::gemm::{execute_prepared, I2fMode, PreparedLayer, TileConfig};
use crate::linalg::Matrix;
use crate::mixed_layer::{partition_matrix, FootprintReport, LayerSchemes, MixedLinearLayer};
use crate::quant::{Codes, QuantScheme, QuantizedTensor, DEFAULT_GROUP_SIZE};
use crate::salience::{global_search, PrecisionAssignment, SalienceMode};
use crate::tensor_store::{
    DenseTensor, Dtype, LayerEntry, LayerKind, ModelManifest, StoredModel, TensorData, TensorEntry,
};

/// Manifest `format` tag of quantized models.
pub const QUANTIZED_FORMAT: &str = "mixquant-mixed";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub group_size: usize,
    pub act_bits: u8,
    pub weight_bits: u8,
    pub salience_mode: SalienceMode,
    pub i2f: I2fMode,
    pub tile_m: usize,
    pub tile_n: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let tile = TileConfig::default();
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            act_bits: 8,
            weight_bits: 4,
            salience_mode: SalienceMode::Aggregated,
            i2f: I2fMode::Fast,
            tile_m: tile.tile_m,
            tile_n: tile.tile_n,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schemes()?;
        self.act_scheme()?;
        self.tile().validate()
    }

    /// Promoted channels use 8-bit symmetric; the rest use `weight_bits`
    /// (4-bit asymmetric, or 8-bit symmetric for a uniform 8-bit model).
    pub fn schemes(&self) -> Result<LayerSchemes> {
        let small = match self.weight_bits {
            4 => QuantScheme::w4_asym(),
            8 => QuantScheme::sym8(),
            b => return Err(Error::usage(format!("unsupported weight bit width {b}; use 4 or 8"))),
        };
        let s = LayerSchemes {
            large: QuantScheme::sym8(),
            small,
        }
        .with_group_size(self.group_size);
        s.validate()?;
        Ok(s)
    }

    pub fn act_scheme(&self) -> Result<QuantScheme> {
        if self.act_bits != 8 {
            return Err(Error::usage(format!(
                "unsupported activation bit width {}; the engine takes 8-bit activations",
                self.act_bits
            )));
        }
        let s = QuantScheme::sym8().with_group_size(self.group_size);
        s.validate()?;
        Ok(s)
    }

    pub fn tile(&self) -> TileConfig {
        TileConfig {
            tile_m: self.tile_m,
            tile_n: self.tile_n,
            group_size: self.group_size,
        }
    }
}

/// Synthetic calibration/evaluation data for a given model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub samples: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn build(&self, model: &ToyModel) -> Result<CalibrationSet> {
        make_synthetic_dataset(model.input_dim(), model.num_classes(), self.samples, self.seed)
    }
}

/// Gradients on `data`, then the global precision search.
pub fn search_model(
    model: &ToyModel,
    data: &CalibrationSet,
    config: &PipelineConfig,
    percent: f64,
) -> Result<PrecisionAssignment> {
    let schemes = config.schemes()?;
    let mode = match config.salience_mode {
        SalienceMode::Aggregated => GradientMode::Aggregated,
        SalienceMode::PerSample => GradientMode::PerSample,
    };
    let grads = compute_gradients(model, data, mode)?;
    let a = global_search(model, &grads, schemes.small, percent, config.salience_mode)?;
    log::debug!(
        "promoted {} of {} channels from {} samples",
        a.n_largebit,
        a.total_channels,
        data.len()
    );
    Ok(a)
}

/// A toy model whose linear layers run on the mixed-precision engine.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    layers: Vec<PreparedLayer>,
    act_scheme: QuantScheme,
    i2f: I2fMode,
}

impl QuantizedModel {
    pub fn new(layers: Vec<PreparedLayer>, act_scheme: QuantScheme, i2f: I2fMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("a quantized model needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].layer().out_features() != w[1].layer().in_features() {
                return Err(Error::shape(format!(
                    "layer `{}` outputs {} features but `{}` expects {}",
                    w[0].layer().name(),
                    w[0].layer().out_features(),
                    w[1].layer().name(),
                    w[1].layer().in_features()
                )));
            }
        }
        Ok(Self {
            layers,
            act_scheme,
            i2f,
        })
    }

    pub fn layers(&self) -> &[PreparedLayer] {
        &self.layers
    }

    pub fn act_scheme(&self) -> &QuantScheme {
        &self.act_scheme
    }

    pub fn i2f(&self) -> I2fMode {
        self.i2f
    }

    pub fn with_i2f(mut self, i2f: I2fMode) -> Self {
        self.i2f = i2f;
        self
    }

    pub fn footprint(&self) -> FootprintReport {
        let layers: Vec<MixedLinearLayer> = self.layers.iter().map(|l| l.layer().clone()).collect();
        FootprintReport::from_layers(&layers)
    }

    /// Serialize codes, scales, zero-points and index maps. Empty
    /// sub-problems have no tensors.
    pub fn to_stored(&self, name: &str, metadata: BTreeMap<String, String>) -> Result<StoredModel> {
        let mut layers = Vec::new();
        let mut entries = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        let mut add = |layer: &mut LayerEntry, role: &str, t: DenseTensor| {
            let tname = format!("{}.{role}", layer.name);
            entries.insert(
                tname.clone(),
                TensorEntry {
                    file: format!("{tname}.bin"),
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                },
            );
            tensors.insert(tname.clone(), t);
            layer.tensors.insert(role.to_string(), tname);
        };
        let last = self.layers.len() - 1;
        let mut schemes = None;
        for (i, p) in self.layers.iter().enumerate() {
            let l = p.layer();
            match schemes {
                None => schemes = Some(*l.schemes()),
                Some(s) if s != *l.schemes() => {
                    return Err(Error::data("all layers must share one scheme pair to be stored"))
                }
                _ => {}
            }
            let mut entry = LayerEntry {
                name: l.name().to_string(),
                kind: LayerKind::Linear,
                in_features: l.in_features(),
                out_features: l.out_features(),
                tensors: BTreeMap::new(),
            };
            for (prefix, sub, map) in [("sub8", l.sub8(), l.index_map8()), ("sub4", l.sub4(), l.index_map4())] {
                if sub.rows() == 0 {
                    continue;
                }
                for (role, t) in sub_tensors(sub)? {
                    add(&mut entry, &format!("{prefix}.{role}"), t);
                }
                let map_role = if prefix == "sub8" { "map8" } else { "map4" };
                let idx: Vec<i32> = map.iter().map(|&c| c as i32).collect();
                add(&mut entry, map_role, DenseTensor::new(vec![idx.len()], TensorData::I32(idx))?);
            }
            let width = l.out_features();
            layers.push(entry);
            if i != last {
                layers.push(LayerEntry {
                    name: format!("relu{i}"),
                    kind: LayerKind::ActivationFn,
                    in_features: width,
                    out_features: width,
                    tensors: BTreeMap::new(),
                });
            }
        }
        let mut metadata = metadata;
        metadata.insert("format".into(), QUANTIZED_FORMAT.into());
        metadata.insert("schemes".into(), to_json(&schemes)?);
        metadata.insert("act_scheme".into(), to_json(&self.act_scheme)?);
        Ok(StoredModel {
            manifest: ModelManifest {
                name: name.to_string(),
                layers,
                tensors: entries,
                metadata,
            },
            tensors,
        })
    }

    pub fn from_stored(stored: &StoredModel, tile_m: usize, tile_n: usize, i2f: I2fMode) -> Result<Self> {
        let meta = &stored.manifest.metadata;
        if meta.get("format").map(String::as_str) != Some(QUANTIZED_FORMAT) {
            return Err(Error::data(format!(
                "model `{}` is not a quantized model",
                stored.manifest.name
            )));
        }
        let schemes: LayerSchemes = from_json(meta, "schemes")?;
        let act_scheme: QuantScheme = from_json(meta, "act_scheme")?;
        schemes.validate()?;
        let tile = TileConfig {
            tile_m,
            tile_n,
            group_size: schemes.group_size(),
        };
        let mut layers = Vec::new();
        for entry in stored.manifest.linear_layers() {
            let (k, n) = (entry.in_features, entry.out_features);
            let (sub8, map8) = load_sub(stored, entry, "sub8", "map8", schemes.large)?;
            let (sub4, map4) = load_sub(stored, entry, "sub4", "map4", schemes.small)?;
            let layer = MixedLinearLayer::from_parts(entry.name.clone(), n, k, sub8, sub4, map8, map4)?;
            layers.push(PreparedLayer::new(layer, tile)?);
        }
        Self::new(layers, act_scheme, i2f)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::data(format!("cannot encode metadata: {e}")))
}

fn from_json<T: for<'de> Deserialize<'de>>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let text = meta
        .get(key)
        .ok_or_else(|| Error::data(format!("metadata entry `{key}` is missing")))?;
    serde_json::from_str(text).map_err(|e| Error::data(format!("metadata entry `{key}`: {e}")))
}

fn sub_tensors(q: &QuantizedTensor) -> Result<Vec<(&'static str, DenseTensor)>> {
    let (rows, cols) = (q.rows(), q.cols());
    let data = match q.codes() {
        Codes::Signed(c) => TensorData::I8(c.clone()),
        Codes::Packed4(c) => TensorData::U4(c.clone()),
        Codes::Unsigned(c) => TensorData::U8(c.clone()),
    };
    let gpr = q.groups_per_row();
    let mut out = vec![
        ("codes", DenseTensor::new(vec![rows, cols], data)?),
        ("scales", DenseTensor::from_f32(vec![rows, gpr], q.scales().to_vec())?),
    ];
    if !q.scheme().symmetric {
        out.push((
            "zeros",
            DenseTensor::new(vec![rows, gpr], TensorData::U8(q.zero_points().to_vec()))?,
        ));
    }
    Ok(out)
}

fn load_sub(
    stored: &StoredModel,
    entry: &LayerEntry,
    prefix: &str,
    map_role: &str,
    scheme: QuantScheme,
) -> Result<(QuantizedTensor, Vec<usize>)> {
    let cols = entry.in_features;
    let gpr = scheme.groups_per_row(cols);
    let codes_role = format!("{prefix}.codes");
    if !entry.tensors.contains_key(&codes_role) {
        let codes = match (scheme.symmetric, scheme.bit_width) {
            (true, _) => Codes::Signed(Vec::new()),
            (false, 4) => Codes::Packed4(Vec::new()),
            _ => Codes::Unsigned(Vec::new()),
        };
        let q = QuantizedTensor::from_parts(0, cols, scheme, codes, Vec::new(), Vec::new())?;
        return Ok((q, Vec::new()));
    }
    let ctx = |e: Error| Error::data(format!("layer `{}` {prefix}: {e}", entry.name));
    let codes_t = stored.layer_tensor(entry, &codes_role)?;
    let (rows, c) = codes_t.matrix_dims()?;
    if c != cols {
        return Err(Error::shape(format!(
            "layer `{}` {prefix} codes have {c} columns, expected {cols}",
            entry.name
        )));
    }
    let codes = match (codes_t.data(), scheme.symmetric, scheme.bit_width) {
        (TensorData::I8(v), true, _) => Codes::Signed(v.clone()),
        (TensorData::U4(v), false, 4) => Codes::Packed4(v.clone()),
        (TensorData::U8(v), false, 8) => Codes::Unsigned(v.clone()),
        (d, _, _) => {
            return Err(Error::data(format!(
                "layer `{}` {prefix} codes are {}, which does not match the scheme",
                entry.name,
                d.dtype()
            )))
        }
    };
    let scales_t = stored.layer_tensor(entry, &format!("{prefix}.scales"))?;
    let scales = scales_t
        .as_f32()
        .ok_or_else(|| Error::data(format!("layer `{}` {prefix} scales must be f32", entry.name)))?
        .to_vec();
    let zeros = if scheme.symmetric {
        vec![0; rows * gpr]
    } else {
        let t = stored.layer_tensor(entry, &format!("{prefix}.zeros"))?;
        t.as_u8()
            .filter(|_| t.dtype() == Dtype::U8)
            .ok_or_else(|| Error::data(format!("layer `{}` {prefix} zeros must be u8", entry.name)))?
            .to_vec()
    };
    let q = QuantizedTensor::from_parts(rows, cols, scheme, codes, scales, zeros).map_err(ctx)?;
    let map_t = stored.layer_tensor(entry, map_role)?;
    let map = map_t
        .as_i32()
        .ok_or_else(|| Error::data(format!("layer `{}` {map_role} must be i32", entry.name)))?
        .iter()
        .map(|&i| usize::try_from(i).map_err(|_| Error::data(format!("negative channel index {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((q, map))
}

impl LinearStack for QuantizedModel {
    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn input_dim(&self) -> usize {
        self.layers[0].layer().in_features()
    }

    fn apply_layer(&self, index: usize, input: &Matrix) -> Result<Matrix> {
        let layer = &self.layers[index];
        let a: Vec<f32> = input.as_slice().iter().map(|&x| x as f32).collect();
        let y = execute_prepared(&a, input.rows(), layer, &self.act_scheme, self.i2f)?;
        Matrix::from_vec(
            input.rows(),
            layer.layer().out_features(),
            y.into_iter().map(f64::from).collect(),
        )
    }
}

/// Split and quantize every layer of `model` according to `assignment`.
pub fn quantize_model(
    model: &ToyModel,
    assignment: &PrecisionAssignment,
    config: &PipelineConfig,
) -> Result<QuantizedModel> {
    let schemes = config.schemes()?;
    let act_scheme = config.act_scheme()?;
    let tile = config.tile();
    let out: Vec<usize> = model.weights().iter().map(Matrix::rows).collect();
    assignment.validate(&out)?;
    let layers = model
        .weights()
        .iter()
        .zip(&assignment.layers)
        .map(|(w, a)| {
            log::debug!("quantizing `{}`: {} promoted rows", a.name, a.largebit.len());
            PreparedLayer::new(partition_matrix(&a.name, w, a, &schemes)?, tile)
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedModel::new(layers, act_scheme, config.i2f)
}
