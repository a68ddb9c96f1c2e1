//! Tensor containers, the on-disk model format, and the 4-bit nibble codec.
//!
//! A model directory holds `manifest.json` plus one raw little-endian,
//! row-major binary file per tensor. The manifest declares every tensor's
//! file, dtype and shape; loading checks each file against its declaration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Pack 4-bit values two per byte, low nibble first. An odd count leaves the
/// final high nibble zero.
pub fn pack_nibbles(values: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len().div_ceil(2));
    for pair in values.chunks(2) {
        let lo = check_nibble(pair[0])?;
        let hi = match pair.get(1) {
            Some(&v) => check_nibble(v)?,
            None => 0,
        };
        out.push(lo | (hi << 4));
    }
    Ok(out)
}

/// Inverse of [`pack_nibbles`] for the first `count` values.
pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if count > bytes.len() * 2 {
        return Err(Error::Range {
            what: "nibble count",
            value: count as i64,
            range: "[0, 2 * byte length]",
        });
    }
    Ok((0..count).map(|i| nibble_at(bytes, i)).collect())
}

/// The `index`-th nibble of a packed buffer.
#[inline]
pub fn nibble_at(bytes: &[u8], index: usize) -> u8 {
    let b = bytes[index / 2];
    if index.is_multiple_of(2) {
        b & 0x0F
    } else {
        b >> 4
    }
}

fn check_nibble(v: u8) -> Result<u8> {
    if v > 15 {
        Err(Error::Range {
            what: "4-bit value",
            value: v as i64,
            range: "[0, 15]",
        })
    } else {
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Dtype {
    F64,
    F32,
    I32,
    I8,
    U8,
    /// Unsigned 4-bit, two values per byte (see [`pack_nibbles`]).
    U4,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
            Dtype::I32 => "i32",
            Dtype::I8 => "i8",
            Dtype::U8 => "u8",
            Dtype::U4 => "u4",
        }
    }

    /// Payload size in bytes for `count` elements.
    pub fn payload_bytes(self, count: usize) -> usize {
        match self {
            Dtype::F64 => count * 8,
            Dtype::F32 | Dtype::I32 => count * 4,
            Dtype::I8 | Dtype::U8 => count,
            Dtype::U4 => count.div_ceil(2),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "f64" => Dtype::F64,
            "f32" => Dtype::F32,
            "i32" => Dtype::I32,
            "i8" => Dtype::I8,
            "u8" => Dtype::U8,
            "u4" => Dtype::U4,
            other => return Err(Error::UnknownDtype(other.to_string())),
        })
    }
}

impl TryFrom<String> for Dtype {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Dtype> for String {
    fn from(d: Dtype) -> String {
        d.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
    I8(Vec<i8>),
    U8(Vec<u8>),
    U4(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::F32(_) => Dtype::F32,
            TensorData::I32(_) => Dtype::I32,
            TensorData::I8(_) => Dtype::I8,
            TensorData::U8(_) => Dtype::U8,
            TensorData::U4(_) => Dtype::U4,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len() * 8,
            TensorData::F32(v) => v.len() * 4,
            TensorData::I32(v) => v.len() * 4,
            TensorData::I8(v) => v.len(),
            TensorData::U8(v) | TensorData::U4(v) => v.len(),
        }
    }
}

/// An immutable, contiguous, row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "dimensions must all be >= 1, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        let expected = data.dtype().payload_bytes(count);
        if data.byte_len() != expected {
            return Err(Error::shape(format!(
                "{} payload of {} bytes does not match shape {shape:?} ({expected} bytes)",
                data.dtype(),
                data.byte_len()
            )));
        }
        if let TensorData::U4(bytes) = &data {
            if count % 2 == 1 && bytes[bytes.len() - 1] >> 4 != 0 {
                return Err(Error::data("u4 padding nibble must be zero"));
            }
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    /// Pack unsigned 4-bit values into a `u4` tensor.
    pub fn from_u4(shape: Vec<usize>, values: &[u8]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if values.len() != count {
            return Err(Error::shape(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Self::new(shape, TensorData::U4(pack_nibbles(values)?))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Packed bytes of a `u4` tensor.
    pub fn as_u4_packed(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U4(v) => Some(v),
            _ => None,
        }
    }

    /// Any real-valued tensor widened to f64.
    pub fn to_f64_vec(&self) -> Option<Vec<f64>> {
        match &self.data {
            TensorData::F64(v) => Some(v.clone()),
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            _ => None,
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
            TensorData::U8(v) | TensorData::U4(v) => v.clone(),
        }
    }

    pub fn from_le_bytes(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if bytes.len() != dtype.payload_bytes(count) {
            return Err(Error::shape(format!(
                "{} bytes cannot hold {dtype} tensor of shape {shape:?}",
                bytes.len()
            )));
        }
        let data = match dtype {
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            Dtype::U8 => TensorData::U8(bytes.to_vec()),
            Dtype::U4 => TensorData::U4(bytes.to_vec()),
        };
        Self::new(shape, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "activation-fn")]
    ActivationFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    pub in_features: usize,
    pub out_features: usize,
    /// Role (e.g. `weight`) to tensor name.
    #[serde(default)]
    pub tensors: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub layers: Vec<LayerEntry>,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ModelManifest {
    pub fn linear_layers(&self) -> impl Iterator<Item = &LayerEntry> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Linear)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let mut prev_out: Option<(usize, &str)> = None;
        for layer in &self.layers {
            if layer.in_features == 0 || layer.out_features == 0 {
                return Err(Error::shape(format!(
                    "layer `{}` has a zero feature count",
                    layer.name
                )));
            }
            match layer.kind {
                LayerKind::Linear => {
                    if let Some((out, prev)) = prev_out {
                        if out != layer.in_features {
                            return Err(Error::shape(format!(
                                "layer `{prev}` produces {out} features but `{}` expects {}",
                                layer.name, layer.in_features
                            )));
                        }
                    }
                    prev_out = Some((layer.out_features, &layer.name));
                }
                LayerKind::ActivationFn => {
                    if layer.in_features != layer.out_features {
                        return Err(Error::shape(format!(
                            "activation `{}` must preserve width ({} -> {})",
                            layer.name, layer.in_features, layer.out_features
                        )));
                    }
                }
            }
            for (role, tensor) in &layer.tensors {
                if !self.tensors.contains_key(tensor) {
                    return Err(Error::data(format!(
                        "layer `{}` role `{role}` references undeclared tensor `{tensor}`",
                        layer.name
                    )));
                }
            }
        }
        for (name, entry) in &self.tensors {
            if entry.shape.is_empty() || entry.shape.contains(&0) {
                return Err(Error::shape(format!(
                    "tensor `{name}` has invalid shape {:?}",
                    entry.shape
                )));
            }
        }
        Ok(())
    }

    fn owner_of(&self, tensor: &str) -> &str {
        self.layers
            .iter()
            .find(|l| l.tensors.values().any(|t| t == tensor))
            .map(|l| l.name.as_str())
            .unwrap_or("<unattached>")
    }
}

/// A manifest together with its loaded tensors, keyed by tensor name.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredModel {
    pub manifest: ModelManifest,
    pub tensors: BTreeMap<String, DenseTensor>,
}

impl StoredModel {
    pub fn tensor(&self, name: &str) -> Result<&DenseTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::data(format!("tensor `{name}` not present")))
    }

    /// The tensor a layer binds to `role`.
    pub fn layer_tensor(&self, layer: &LayerEntry, role: &str) -> Result<&DenseTensor> {
        let name = layer.tensors.get(role).ok_or_else(|| {
            Error::data(format!("layer `{}` has no `{role}` tensor", layer.name))
        })?;
        self.tensor(name)
    }
}

pub fn save_model(
    manifest: &ModelManifest,
    tensors: &BTreeMap<String, DenseTensor>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    manifest.validate()?;
    for (name, entry) in &manifest.tensors {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::data(format!("no data supplied for tensor `{name}`")))?;
        if t.dtype() != entry.dtype || t.shape() != entry.shape.as_slice() {
            return Err(Error::shape(format!(
                "tensor `{name}` is {} {:?} but the manifest declares {} {:?}",
                t.dtype(),
                t.shape(),
                entry.dtype,
                entry.shape
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, entry) in &manifest.tensors {
        let path = dir.join(&entry.file);
        fs::write(&path, tensors[name].to_le_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<ModelManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| {
        // Surface our own dtype error instead of serde's wrapper text.
        match e.to_string() {
            s if s.starts_with("unknown dtype") => {
                let name = s.split('`').nth(1).unwrap_or_default().to_string();
                Error::UnknownDtype(name)
            }
            _ => Error::json(&path, e),
        }
    })?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<StoredModel> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingTensor {
                    layer: manifest.owner_of(name).to_string(),
                    tensor: name.clone(),
                    path,
                })
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let count: usize = entry.shape.iter().product();
        let expected = entry.dtype.payload_bytes(count);
        if bytes.len() != expected {
            return Err(Error::shape(format!(
                "tensor `{name}` of layer `{}`: file has {} bytes, declared {} {:?} needs {expected}",
                manifest.owner_of(name),
                bytes.len(),
                entry.dtype,
                entry.shape
            )));
        }
        let t = DenseTensor::from_le_bytes(entry.dtype, entry.shape.clone(), &bytes)?;
        tensors.insert(name.clone(), t);
    }
    Ok(StoredModel { manifest, tensors })
}
