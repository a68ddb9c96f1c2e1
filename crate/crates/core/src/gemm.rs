//! Reference integer GEMM engine for mixed 8-bit/4-bit linear layers.
//!
//! Per output element and per quantization group:
//!
//! 1. step-one dequantization: `w' = W_q - z` as i8 (4-bit weights land in
//!    `[-15, 15]`; symmetric weights use their codes directly);
//! 2. an i32 dot product of activation codes with `w'`;
//! 3. integer-to-float conversion of the group accumulator, either native or
//!    through the biased bit pattern `0x4B400000`;
//! 4. step-two dequantization: multiply by `s_a * s_w` of the group and add
//!    into an f32 global accumulator.
//!
//! Groups are visited in ascending order for every output element, so the
//! float rounding sequence is fixed regardless of tiling or worker count.
//! The GPU pipeline stages (global-to-shared copies, prefetch) have no CPU
//! counterpart; only the order of the steps above is preserved.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed_layer::{reassemble_output, MixedLinearLayer};
use crate::quant::{Codes, QuantScheme, QuantizedTensor};

/// Shared bit pattern of the integer and float conversion biases. As a
/// float it is 1.5 * 2^23; every float in `[2^23, 2^24)` has unit spacing,
/// so integers within 2^22 of the bias map onto floats bit for bit.
pub const I2F_BIAS_BITS: u32 = 0x4B40_0000;

pub struct I2FConstants;

impl I2FConstants {
    pub const BIAS_INT: i32 = I2F_BIAS_BITS as i32;
    pub const BIAS_FP: f32 = f32::from_bits(I2F_BIAS_BITS);
    /// Inclusive lower end of the exactly convertible range.
    pub const SAFE_MIN: i32 = -(1 << 22);
    /// Exclusive upper end.
    pub const SAFE_END: i32 = 1 << 22;

    pub fn in_range(x: i32) -> bool {
        (Self::SAFE_MIN..Self::SAFE_END).contains(&x)
    }
}

/// Largest group for which an i8 x i8 dot product stays inside the fast
/// conversion range.
pub const MAX_FAST_I2F_GROUP: usize = 128;

/// Integer to float via the bias trick. Exact for `x` in `[-2^22, 2^22)`;
/// outside that range the result is meaningless (checked in debug builds).
#[inline]
pub fn fast_i2f(x: i32) -> f32 {
    debug_assert!(I2FConstants::in_range(x), "fast_i2f input {x} out of range");
    let tmp = x.wrapping_add(I2FConstants::BIAS_INT);
    f32::from_bits(tmp as u32) - I2FConstants::BIAS_FP
}

/// Convert an accumulator that was seeded with `BIAS_INT` before the dot
/// product: only the float subtraction remains.
#[inline]
fn biased_accumulator_to_f32(acc: i32) -> f32 {
    f32::from_bits(acc as u32) - I2FConstants::BIAS_FP
}

/// Worst-case |dot product| of one group.
pub const fn max_group_accumulator(group_size: usize, act_max: i64, weight_max: i64) -> i64 {
    group_size as i64 * act_max * weight_max
}

const _: () = assert!(max_group_accumulator(MAX_FAST_I2F_GROUP, 127, 127) < 1 << 22);
const _: () = assert!(max_group_accumulator(MAX_FAST_I2F_GROUP, 127, 15) < 1 << 22);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum I2fMode {
    Native,
    #[default]
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    /// Activation rows per block.
    pub tile_m: usize,
    /// Weight rows (output columns) per task.
    pub tile_n: usize,
    /// Reduction length per integer accumulation; equals the quantization
    /// group size.
    pub group_size: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_m: 16,
            tile_n: 64,
            group_size: MAX_FAST_I2F_GROUP,
        }
    }
}

impl TileConfig {
    pub fn for_group_size(group_size: usize) -> Self {
        Self {
            group_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_m == 0 || self.tile_n == 0 {
            return Err(Error::usage("tile sizes must be >= 1"));
        }
        if self.group_size == 0 || self.group_size > MAX_FAST_I2F_GROUP {
            return Err(Error::usage(format!(
                "group tile must lie in 1..={MAX_FAST_I2F_GROUP}, got {}",
                self.group_size
            )));
        }
        Ok(())
    }
}

/// Weights reordered ahead of time into tile-major layout: for each tile of
/// `tile_n` rows, for each group, the rows' raw codes for that group are
/// contiguous. Scales and zero-points follow the same `[tile][group][row]`
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrepackedWeights {
    rows: usize,
    cols: usize,
    group_size: usize,
    tile_n: usize,
    groups: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
    zeros: Vec<i8>,
    /// Offsets into `codes` per (tile, group).
    block_offsets: Vec<usize>,
}

impl PrepackedWeights {
    pub fn new(w: &QuantizedTensor, tile_n: usize) -> Result<Self> {
        if tile_n == 0 {
            return Err(Error::usage("tile_n must be >= 1"));
        }
        let scheme = w.scheme();
        match (scheme.symmetric, scheme.bit_width, w.codes()) {
            (true, _, Codes::Signed(_)) | (false, 4, Codes::Packed4(_)) => {}
            _ => {
                return Err(Error::usage(
                    "engine weights must be symmetric or 4-bit asymmetric",
                ))
            }
        }
        let (rows, cols) = (w.rows(), w.cols());
        let groups = w.groups_per_row();
        let tiles = rows.div_ceil(tile_n);
        let mut codes = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(rows * groups);
        let mut zeros = Vec::with_capacity(rows * groups);
        let mut block_offsets = Vec::with_capacity(tiles * groups);
        for t in 0..tiles {
            let tile_rows = t * tile_n..((t + 1) * tile_n).min(rows);
            for g in 0..groups {
                block_offsets.push(codes.len());
                for r in tile_rows.clone() {
                    codes.extend(w.group_span(g).map(|c| w.code(r, c) as i8));
                    let p = w.group_params(r, g);
                    scales.push(p.scale);
                    zeros.push(p.zero_point as i8);
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            group_size: scheme.group_size,
            tile_n,
            groups,
            codes,
            scales,
            zeros,
            block_offsets,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tiles(&self) -> usize {
        self.rows.div_ceil(self.tile_n)
    }

    fn tile_rows(&self, t: usize) -> usize {
        ((t + 1) * self.tile_n).min(self.rows) - t * self.tile_n
    }

    fn group_len(&self, g: usize) -> usize {
        ((g + 1) * self.group_size).min(self.cols) - g * self.group_size
    }
}

/// Activations in the engine's input form: i8 codes and per-(row, group)
/// scales.
struct ActView<'a> {
    rows: usize,
    codes: &'a [i8],
    scales: &'a [f32],
    groups: usize,
    cols: usize,
}

fn act_view(a: &QuantizedTensor) -> Result<ActView<'_>> {
    let codes = match a.codes() {
        Codes::Signed(c) if a.scheme().bit_width == 8 => c,
        _ => return Err(Error::usage("activations must be 8-bit symmetric codes")),
    };
    Ok(ActView {
        rows: a.rows(),
        codes,
        scales: a.scales(),
        groups: a.groups_per_row(),
        cols: a.cols(),
    })
}

fn check_alignment(act: &ActView<'_>, act_group: usize, w: &PrepackedWeights, tile: &TileConfig) -> Result<()> {
    tile.validate()?;
    if act.cols != w.cols {
        return Err(Error::shape(format!(
            "activation has {} columns, weight has {}",
            act.cols, w.cols
        )));
    }
    if act_group != w.group_size || tile.group_size != w.group_size {
        return Err(Error::shape(format!(
            "group boundaries differ: activation {act_group}, weight {}, tile {}",
            w.group_size, tile.group_size
        )));
    }
    if w.tile_n != tile.tile_n {
        return Err(Error::usage(format!(
            "weights prepacked for tile_n {} but tile config uses {}",
            w.tile_n, tile.tile_n
        )));
    }
    Ok(())
}

/// One task: all activation rows against one weight tile. Returns an
/// `m x tile_rows` row-major block.
fn run_tile(act: &ActView<'_>, w: &PrepackedWeights, t: usize, tile: &TileConfig, mode: I2fMode) -> Vec<f32> {
    let n = w.tile_rows(t);
    let mut out = vec![0.0f32; act.rows * n];
    let mut step1 = vec![0i8; n * w.group_size];
    for g in 0..w.groups {
        let len = w.group_len(g);
        let block = w.block_offsets[t * w.groups + g];
        let meta = t * w.groups * w.tile_n + g * n;
        // Step one: zero-point subtraction in 8-bit.
        for r in 0..n {
            let z = w.zeros[meta + r];
            let src = &w.codes[block + r * len..block + (r + 1) * len];
            for (dst, &c) in step1[r * len..(r + 1) * len].iter_mut().zip(src) {
                *dst = c - z;
            }
        }
        let k0 = g * w.group_size;
        for m0 in (0..act.rows).step_by(tile.tile_m) {
            for m in m0..(m0 + tile.tile_m).min(act.rows) {
                let a = &act.codes[m * act.cols + k0..m * act.cols + k0 + len];
                let sa = act.scales[m * act.groups + g];
                for r in 0..n {
                    let wq = &step1[r * len..(r + 1) * len];
                    let value = match mode {
                        I2fMode::Native => {
                            let acc: i32 = a.iter().zip(wq).map(|(&x, &y)| x as i32 * y as i32).sum();
                            acc as f32
                        }
                        I2fMode::Fast => {
                            let mut acc = I2FConstants::BIAS_INT;
                            for (&x, &y) in a.iter().zip(wq) {
                                acc += x as i32 * y as i32;
                            }
                            biased_accumulator_to_f32(acc)
                        }
                    };
                    // Step two: both group scales, then the global f32 accumulator.
                    out[m * n + r] += value * (sa * w.scales[meta + r]);
                }
            }
        }
    }
    out
}

fn gemm_blocks(act: &ActView<'_>, w: &PrepackedWeights, tile: &TileConfig, mode: I2fMode) -> Vec<Vec<f32>> {
    (0..w.tiles())
        .into_par_iter()
        .map(|t| run_tile(act, w, t, tile, mode))
        .collect()
}

fn stitch_tiles(m: usize, w: &PrepackedWeights, blocks: Vec<Vec<f32>>) -> Vec<f32> {
    let mut out = vec![0.0f32; m * w.rows];
    for (t, block) in blocks.into_iter().enumerate() {
        let n = w.tile_rows(t);
        for i in 0..m {
            out[i * w.rows + t * w.tile_n..i * w.rows + t * w.tile_n + n]
                .copy_from_slice(&block[i * n..(i + 1) * n]);
        }
    }
    out
}

/// `A_q . W^T` with two-step dequantization; returns an `m x w.rows()` f32
/// matrix.
pub fn gemm_prepacked(a: &QuantizedTensor, w: &PrepackedWeights, tile: &TileConfig, mode: I2fMode) -> Result<Vec<f32>> {
    let act = act_view(a)?;
    check_alignment(&act, a.scheme().group_size, w, tile)?;
    Ok(stitch_tiles(act.rows, w, gemm_blocks(&act, w, tile, mode)))
}

pub fn group_gemm_twostep(a: &QuantizedTensor, w: &QuantizedTensor, tile: &TileConfig, mode: I2fMode) -> Result<Vec<f32>> {
    gemm_prepacked(a, &PrepackedWeights::new(w, tile.tile_n)?, tile, mode)
}

/// A mixed layer with both sub-problems prepacked for one tile config.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedLayer {
    layer: MixedLinearLayer,
    tile: TileConfig,
    packed8: PrepackedWeights,
    packed4: PrepackedWeights,
}

impl PreparedLayer {
    pub fn new(layer: MixedLinearLayer, tile: TileConfig) -> Result<Self> {
        tile.validate()?;
        if tile.group_size != layer.schemes().group_size() {
            return Err(Error::usage(format!(
                "tile group {} differs from the layer's quantization group {}",
                tile.group_size,
                layer.schemes().group_size()
            )));
        }
        let packed8 = PrepackedWeights::new(layer.sub8(), tile.tile_n)?;
        let packed4 = PrepackedWeights::new(layer.sub4(), tile.tile_n)?;
        Ok(Self {
            layer,
            tile,
            packed8,
            packed4,
        })
    }

    pub fn layer(&self) -> &MixedLinearLayer {
        &self.layer
    }

    pub fn tile(&self) -> &TileConfig {
        &self.tile
    }
}

fn check_act_scheme(act: &QuantScheme, group_size: usize) -> Result<()> {
    act.validate()?;
    if !act.symmetric || act.bit_width != 8 {
        return Err(Error::usage("activation scheme must be 8-bit symmetric"));
    }
    if act.group_size != group_size {
        return Err(Error::shape(format!(
            "activation groups ({}) must align with weight groups ({group_size})",
            act.group_size
        )));
    }
    Ok(())
}

/// Quantize `a` (`m x in_features`, row-major) per group, run both
/// sub-problems in one task pool, and scatter the results to the original
/// output channels.
pub fn execute_prepared(a: &[f32], m: usize, layer: &PreparedLayer, act_scheme: &QuantScheme, mode: I2fMode) -> Result<Vec<f32>> {
    let k = layer.layer.in_features();
    check_act_scheme(act_scheme, layer.tile.group_size)?;
    if a.len() != m * k {
        return Err(Error::shape(format!(
            "activation has {} values, expected {m} x {k}",
            a.len()
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let values: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let aq = QuantizedTensor::quantize(&values, m, k, *act_scheme)?;
    let act = act_view(&aq)?;
    let (p8, p4) = (&layer.packed8, &layer.packed4);
    check_alignment(&act, act_scheme.group_size, p8, &layer.tile)?;
    check_alignment(&act, act_scheme.group_size, p4, &layer.tile)?;

    // Tasks from both sub-problems share one pool; outputs are disjoint.
    let tasks: Vec<(&PrepackedWeights, usize)> = (0..p8.tiles())
        .map(|t| (p8, t))
        .chain((0..p4.tiles()).map(|t| (p4, t)))
        .collect();
    let mut blocks: Vec<Vec<f32>> = tasks
        .par_iter()
        .map(|&(w, t)| run_tile(&act, w, t, &layer.tile, mode))
        .collect();
    let blocks4 = blocks.split_off(p8.tiles());
    let y8 = stitch_tiles(m, p8, blocks);
    let y4 = stitch_tiles(m, p4, blocks4);
    reassemble_output(m, &y8, layer.layer.index_map8(), &y4, layer.layer.index_map4())
}

pub fn execute_mixed_linear(
    a: &[f32],
    m: usize,
    layer: &MixedLinearLayer,
    act_scheme: &QuantScheme,
    tile: &TileConfig,
    mode: I2fMode,
) -> Result<Vec<f32>> {
    let prepared = PreparedLayer::new(layer.clone(), *tile)?;
    execute_prepared(a, m, &prepared, act_scheme, mode)
}
