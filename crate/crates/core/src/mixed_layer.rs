//! Linear layers split by output channel into an 8-bit symmetric and a 4-bit
//! asymmetric sub-problem.
//!
//! The sub-problems share the reduction dimension and its group boundaries
//! and produce disjoint output columns, so they run independently and their
//! results are scattered back through the index maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::{QuantScheme, QuantizedTensor};
use crate::salience::{check_partition, LayerAssignment, PrecisionAssignment};
use crate::tensor_store::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchemes {
    pub large: QuantScheme,
    pub small: QuantScheme,
}

impl Default for LayerSchemes {
    fn default() -> Self {
        Self {
            large: QuantScheme::sym8(),
            small: QuantScheme::w4_asym(),
        }
    }
}

impl LayerSchemes {
    pub fn with_group_size(self, group_size: usize) -> Self {
        Self {
            large: self.large.with_group_size(group_size),
            small: self.small.with_group_size(group_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.large.validate()?;
        self.small.validate()?;
        if self.large.group_size != self.small.group_size {
            return Err(Error::usage(format!(
                "sub-problems must share group boundaries ({} vs {})",
                self.large.group_size, self.small.group_size
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.large.group_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedLinearLayer {
    name: String,
    out_features: usize,
    in_features: usize,
    schemes: LayerSchemes,
    sub8: QuantizedTensor,
    sub4: QuantizedTensor,
    index_map8: Vec<usize>,
    index_map4: Vec<usize>,
}

impl MixedLinearLayer {
    /// Assemble from already-quantized parts.
    pub fn from_parts(
        name: String,
        out_features: usize,
        in_features: usize,
        sub8: QuantizedTensor,
        sub4: QuantizedTensor,
        index_map8: Vec<usize>,
        index_map4: Vec<usize>,
    ) -> Result<Self> {
        let schemes = LayerSchemes {
            large: *sub8.scheme(),
            small: *sub4.scheme(),
        };
        schemes.validate()?;
        check_partition(&index_map8, &index_map4, out_features)
            .map_err(|e| Error::data(format!("layer `{name}` index maps: {e}")))?;
        if sub8.rows() != index_map8.len() || sub4.rows() != index_map4.len() {
            return Err(Error::shape(format!(
                "layer `{name}`: sub-problem rows ({}, {}) do not match index maps ({}, {})",
                sub8.rows(),
                sub4.rows(),
                index_map8.len(),
                index_map4.len()
            )));
        }
        if sub8.cols() != in_features || sub4.cols() != in_features {
            return Err(Error::shape(format!(
                "layer `{name}`: sub-problems must both have {in_features} columns"
            )));
        }
        Ok(Self {
            name,
            out_features,
            in_features,
            schemes,
            sub8,
            sub4,
            index_map8,
            index_map4,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn schemes(&self) -> &LayerSchemes {
        &self.schemes
    }

    pub fn sub8(&self) -> &QuantizedTensor {
        &self.sub8
    }

    pub fn sub4(&self) -> &QuantizedTensor {
        &self.sub4
    }

    pub fn index_map8(&self) -> &[usize] {
        &self.index_map8
    }

    pub fn index_map4(&self) -> &[usize] {
        &self.index_map4
    }

    /// Dequantized weight in the original channel order.
    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.out_features, self.in_features);
        for (sub, map) in [(&self.sub8, &self.index_map8), (&self.sub4, &self.index_map4)] {
            let values = sub.dequantize_f64();
            for (k, &row) in map.iter().enumerate() {
                out.row_mut(row)
                    .copy_from_slice(&values[k * self.in_features..(k + 1) * self.in_features]);
            }
        }
        out
    }
}

/// Quantize promoted rows with the large scheme and the rest with the small
/// one. Rows keep ascending original order inside each sub-problem.
pub fn partition_and_quantize(
    name: &str,
    weight: &DenseTensor,
    assignment: &LayerAssignment,
    schemes: &LayerSchemes,
) -> Result<MixedLinearLayer> {
    let (rows, cols) = weight.matrix_dims()?;
    let values = weight
        .to_f64_vec()
        .ok_or_else(|| Error::data(format!("layer `{name}` weight must be real-valued")))?;
    partition_rows(name, &values, rows, cols, &assignment.largebit, &assignment.smallbit, schemes)
}

pub fn partition_matrix(
    name: &str,
    weight: &Matrix,
    assignment: &LayerAssignment,
    schemes: &LayerSchemes,
) -> Result<MixedLinearLayer> {
    partition_rows(
        name,
        weight.as_slice(),
        weight.rows(),
        weight.cols(),
        &assignment.largebit,
        &assignment.smallbit,
        schemes,
    )
}

fn partition_rows(
    name: &str,
    values: &[f64],
    rows: usize,
    cols: usize,
    large: &[usize],
    small: &[usize],
    schemes: &LayerSchemes,
) -> Result<MixedLinearLayer> {
    schemes.validate()?;
    check_partition(large, small, rows).map_err(|e| {
        Error::shape(format!("assignment does not cover layer `{name}` ({rows} channels): {e}"))
    })?;
    let gather = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .flat_map(|&r| values[r * cols..(r + 1) * cols].iter().copied())
            .collect()
    };
    let sub8 = QuantizedTensor::quantize(&gather(large), large.len(), cols, schemes.large)?;
    let sub4 = QuantizedTensor::quantize(&gather(small), small.len(), cols, schemes.small)?;
    MixedLinearLayer::from_parts(
        name.to_string(),
        rows,
        cols,
        sub8,
        sub4,
        large.to_vec(),
        small.to_vec(),
    )
}

/// Scatter sub-problem outputs (`m x |map|` each, row-major) into an
/// `m x (|map8| + |map4|)` result.
pub fn reassemble_output(
    m: usize,
    y8: &[f32],
    map8: &[usize],
    y4: &[f32],
    map4: &[usize],
) -> Result<Vec<f32>> {
    let n = map8.len() + map4.len();
    if y8.len() != m * map8.len() || y4.len() != m * map4.len() {
        return Err(Error::shape(format!(
            "sub-problem outputs ({}, {}) do not match {m} rows x maps ({}, {})",
            y8.len(),
            y4.len(),
            map8.len(),
            map4.len()
        )));
    }
    let mut written = vec![false; n];
    for &c in map8.iter().chain(map4) {
        match written.get_mut(c) {
            Some(w) if !*w => *w = true,
            Some(_) => return Err(Error::data(format!("output column {c} mapped twice"))),
            None => return Err(Error::data(format!("output column {c} out of range 0..{n}"))),
        }
    }
    let mut out = vec![0.0f32; m * n];
    for (y, map) in [(y8, map8), (y4, map4)] {
        let w = map.len();
        for i in 0..m {
            for (k, &c) in map.iter().enumerate() {
                out[i * n + c] = y[i * w + k];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub name: String,
    pub large_weights: u64,
    pub small_weights: u64,
    pub payload_bits: u64,
    pub overhead_bits: u64,
    /// Payload bits per weight.
    pub effective_bits: f64,
    pub effective_bits_with_overhead: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub layers: Vec<LayerFootprint>,
    pub total_weights: u64,
    pub payload_bits: u64,
    pub overhead_bits: u64,
    pub total_bits: u64,
    pub effective_bits: f64,
    pub effective_bits_with_overhead: f64,
}

impl FootprintReport {
    fn from_layer_rows(layers: Vec<LayerFootprint>) -> Self {
        let total_weights: u64 = layers.iter().map(|l| l.large_weights + l.small_weights).sum();
        let payload_bits: u64 = layers.iter().map(|l| l.payload_bits).sum();
        let overhead_bits: u64 = layers.iter().map(|l| l.overhead_bits).sum();
        Self {
            layers,
            total_weights,
            payload_bits,
            overhead_bits,
            total_bits: payload_bits + overhead_bits,
            effective_bits: payload_bits as f64 / total_weights as f64,
            effective_bits_with_overhead: (payload_bits + overhead_bits) as f64
                / total_weights as f64,
        }
    }

    /// Footprint of already-quantized layers, counted from their tensors.
    pub fn from_layers(layers: &[MixedLinearLayer]) -> Self {
        let rows = layers
            .iter()
            .map(|l| {
                let payload = l.sub8.payload_bits() + l.sub4.payload_bits();
                let overhead = l.sub8.overhead_bits() + l.sub4.overhead_bits();
                let n = (l.out_features * l.in_features) as f64;
                LayerFootprint {
                    name: l.name.clone(),
                    large_weights: (l.sub8.rows() * l.in_features) as u64,
                    small_weights: (l.sub4.rows() * l.in_features) as u64,
                    payload_bits: payload,
                    overhead_bits: overhead,
                    effective_bits: payload as f64 / n,
                    effective_bits_with_overhead: (payload + overhead) as f64 / n,
                }
            })
            .collect();
        Self::from_layer_rows(rows)
    }
}

/// Footprint implied by an assignment without quantizing anything.
pub fn memory_footprint(
    assignment: &PrecisionAssignment,
    in_features: &[usize],
    schemes: &LayerSchemes,
) -> Result<FootprintReport> {
    schemes.validate()?;
    if in_features.len() != assignment.layers.len() {
        return Err(Error::shape(format!(
            "{} input widths for {} assigned layers",
            in_features.len(),
            assignment.layers.len()
        )));
    }
    let per_group = |s: &QuantScheme| s.scale_storage.bits() + if s.symmetric { 0 } else { 8 };
    let rows = assignment
        .layers
        .iter()
        .zip(in_features)
        .map(|(l, &k)| {
            let n8 = l.largebit.len() as u64;
            let n4 = l.smallbit.len() as u64;
            let k64 = k as u64;
            let payload = k64 * (n8 * schemes.large.bit_width as u64 + n4 * schemes.small.bit_width as u64);
            let groups = schemes.large.groups_per_row(k) as u64;
            let overhead = groups * (n8 * per_group(&schemes.large) + n4 * per_group(&schemes.small));
            let n = ((n8 + n4) * k64) as f64;
            LayerFootprint {
                name: l.name.clone(),
                large_weights: n8 * k64,
                small_weights: n4 * k64,
                payload_bits: payload,
                overhead_bits: overhead,
                effective_bits: payload as f64 / n,
                effective_bits_with_overhead: (payload + overhead) as f64 / n,
            }
        })
        .collect();
    Ok(FootprintReport::from_layer_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Codes;

    fn weight(rows: usize, cols: usize) -> DenseTensor {
        let v = (0..rows * cols).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
        DenseTensor::from_f64(vec![rows, cols], v).unwrap()
    }

    fn assign(n: usize, promoted: &[usize]) -> LayerAssignment {
        LayerAssignment {
            layer_id: 0,
            name: "fc0".into(),
            out_features: n,
            largebit: promoted.to_vec(),
            smallbit: (0..n).filter(|c| !promoted.contains(c)).collect(),
        }
    }

    #[test]
    fn split_by_output_channel() {
        let l = partition_and_quantize("fc0", &weight(4, 8), &assign(4, &[2]), &LayerSchemes::default()).unwrap();
        assert_eq!(l.sub8().rows(), 1);
        assert_eq!(l.index_map8(), &[2]);
        assert_eq!(l.sub4().rows(), 3);
        assert_eq!(l.index_map4(), &[0, 1, 3]);
        assert!(matches!(l.sub8().codes(), Codes::Signed(_)));
        assert!(matches!(l.sub4().codes(), Codes::Packed4(_)));
    }

    #[test]
    fn degenerate_splits() {
        let s = LayerSchemes::default();
        let w4 = partition_and_quantize("a", &weight(3, 5), &assign(3, &[]), &s).unwrap();
        assert_eq!(w4.sub8().rows(), 0);
        assert_eq!(w4.sub4().rows(), 3);
        let w8 = partition_and_quantize("b", &weight(3, 5), &assign(3, &[0, 1, 2]), &s).unwrap();
        assert_eq!(w8.sub4().rows(), 0);
        assert_eq!(w8.sub8().rows(), 3);
    }

    #[test]
    fn assignment_must_cover_layer() {
        let s = LayerSchemes::default();
        assert!(partition_and_quantize("a", &weight(3, 5), &assign(4, &[1]), &s).is_err());
        let mut a = assign(3, &[1]);
        a.smallbit.push(1);
        assert!(partition_and_quantize("a", &weight(3, 5), &a, &s).is_err());
        let bad = LayerSchemes { large: QuantScheme::sym8().with_group_size(64), ..s };
        assert!(matches!(
            partition_and_quantize("a", &weight(3, 5), &assign(3, &[1]), &bad),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn reconstruction_within_scheme_bounds() {
        let w = weight(6, 40);
        let s = LayerSchemes::default().with_group_size(16);
        let l = partition_and_quantize("fc", &w, &assign(6, &[1, 4]), &s).unwrap();
        let d = l.dequantize();
        let orig = w.as_f64().unwrap();
        for r in 0..6 {
            let (sub, k) = match l.index_map8().iter().position(|&x| x == r) {
                Some(k) => (l.sub8(), k),
                None => (l.sub4(), l.index_map4().iter().position(|&x| x == r).unwrap()),
            };
            for c in 0..40 {
                let s = sub.group_params(k, c / 16).scale as f64;
                assert!((d.get(r, c) - orig[r * 40 + c]).abs() <= s / 2.0 * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn reassemble_examples() {
        let (a, b, c) = (1.0, 2.0, 3.0);
        let out = reassemble_output(1, &[8.0], &[2], &[a, b, c], &[0, 1, 3]).unwrap();
        assert_eq!(out, vec![a, b, 8.0, c]);
        let out = reassemble_output(2, &[], &[], &[1.0, 2.0, 3.0, 4.0], &[1, 0]).unwrap();
        assert_eq!(out, vec![2.0, 1.0, 4.0, 3.0]);
        let out = reassemble_output(1, &[1.0], &[0], &[2.0, 3.0], &[1, 2]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
        assert!(reassemble_output(1, &[1.0], &[0], &[2.0], &[0]).is_err());
        assert!(reassemble_output(1, &[1.0], &[0], &[2.0], &[2]).is_err());
    }

    fn global(per_layer: &[(usize, usize)]) -> PrecisionAssignment {
        let sizes: Vec<(String, usize)> =
            per_layer.iter().enumerate().map(|(i, &(n, _))| (format!("fc{i}"), n)).collect();
        let promoted = per_layer
            .iter()
            .enumerate()
            .flat_map(|(l, &(_, p))| (0..p).map(move |c| (l, c)));
        PrecisionAssignment::from_promoted(0.0, &sizes, promoted, None).unwrap()
    }

    #[test]
    fn footprint_matches_serialized_bit_count() {
        let s = LayerSchemes::default().with_group_size(16);
        let a = global(&[(6, 2), (4, 1)]);
        let k = [40, 6];
        let layers: Vec<MixedLinearLayer> = a
            .layers
            .iter()
            .zip(k)
            .map(|(la, k)| partition_and_quantize(&la.name, &weight(la.out_features, k), la, &s).unwrap())
            .collect();
        let analytic = memory_footprint(&a, &k, &s).unwrap();
        let counted = FootprintReport::from_layers(&layers);
        assert_eq!(analytic, counted);
        // Brute force: bytes of the serialized payloads.
        let mut payload_bits = 0u64;
        let mut overhead_bits = 0u64;
        for l in &layers {
            for sub in [l.sub8(), l.sub4()] {
                payload_bits += 8 * match sub.codes() {
                    Codes::Signed(c) => c.len() as u64,
                    Codes::Packed4(c) | Codes::Unsigned(c) => c.len() as u64,
                };
                overhead_bits += 32 * sub.scales().len() as u64;
                if !sub.scheme().symmetric {
                    overhead_bits += 8 * sub.zero_points().len() as u64;
                }
            }
        }
        assert_eq!(payload_bits, analytic.payload_bits);
        assert_eq!(overhead_bits, analytic.overhead_bits);
    }

    #[test]
    fn footprint_effective_bits_formula() {
        let s = LayerSchemes::default();
        for (p, bits) in [(0, 4.0), (1, 4.4), (2, 4.8), (5, 6.0), (10, 8.0)] {
            let a = global(&[(10, p), (10, p)]);
            let f = memory_footprint(&a, &[64, 64], &s).unwrap();
            assert_eq!(f.effective_bits, bits);
            assert!(f.layers.iter().all(|l| l.effective_bits == bits));
        }
    }
}
