//! Uniform affine quantizers.
//!
//! Weights are quantized per output channel with a bit-width from
//! {0, 2, 4, 8, 16}: 0 prunes the channel (zero row, zero bias entry) and 16
//! is a lossless passthrough. Activations share one bit-width across the
//! model and use ranges calibrated from observed post-activation values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::BitAllocation;
use crate::error::{Error, Result};
use crate::model::{ChannelId, Layer, Policy, PolicyModel, Tag};
use crate::sensitivity::CalibrationSet;

/// Default clipping percentile for activation ranges.
pub const DEFAULT_PERCENTILE: f64 = 99.9;

/// Channel precision: one of 0, 2, 4, 8 or 16 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const ZERO: BitWidth = BitWidth(0);
    pub const TWO: BitWidth = BitWidth(2);
    pub const FOUR: BitWidth = BitWidth(4);
    pub const EIGHT: BitWidth = BitWidth(8);
    pub const FULL: BitWidth = BitWidth(16);

    /// Ascending.
    pub const ALL: [BitWidth; 5] = [Self::ZERO, Self::TWO, Self::FOUR, Self::EIGHT, Self::FULL];
    /// Bits that carry a sensitivity table entry.
    pub const SCORED: [BitWidth; 4] = [Self::ZERO, Self::TWO, Self::FOUR, Self::EIGHT];
    /// Bits that use an integer grid.
    pub const GRID: [BitWidth; 3] = [Self::TWO, Self::FOUR, Self::EIGHT];

    pub fn new(bits: u32) -> Result<Self> {
        match bits {
            0 | 2 | 4 | 8 | 16 => Ok(BitWidth(bits as u8)),
            other => Err(Error::InvalidBitWidth(other)),
        }
    }

    pub fn bits(self) -> u32 {
        u32::from(self.0)
    }

    pub fn is_grid(self) -> bool {
        matches!(self.0, 2 | 4 | 8)
    }

    /// Next adjacent demotion target: 16→8→4→2→0.
    pub fn demoted(self) -> Option<BitWidth> {
        match self.0 {
            16 => Some(Self::EIGHT),
            8 => Some(Self::FOUR),
            4 => Some(Self::TWO),
            2 => Some(Self::ZERO),
            _ => None,
        }
    }

    /// Signed integer range `[-2^(b-1), 2^(b-1) - 1]` of a grid bit-width.
    pub fn signed_range(self) -> (i64, i64) {
        let half = 1i64 << (self.0.max(1) - 1);
        (-half, half - 1)
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        BitWidth::new(v)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelQuantParams {
    pub bit: BitWidth,
    pub scale: f64,
    pub zero_point: i64,
}

impl ChannelQuantParams {
    /// Placeholder parameters for 0- and 16-bit channels, which ignore them.
    pub fn passthrough(bit: BitWidth) -> Self {
        ChannelQuantParams {
            bit,
            scale: 1.0,
            zero_point: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Symmetric,
    Asymmetric,
}

/// Symmetric per-row scale: `max|row| / (2^(b-1) - 1)`, zero point 0.
pub fn channel_scale(row: &[f64], bit: BitWidth) -> Result<ChannelQuantParams> {
    if !bit.is_grid() {
        return Err(Error::ParamsNotApplicable(bit.bits()));
    }
    let max_abs = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (_, qmax) = bit.signed_range();
    let scale = if max_abs == 0.0 {
        1.0
    } else {
        max_abs / qmax as f64
    };
    Ok(ChannelQuantParams {
        bit,
        scale,
        zero_point: 0,
    })
}

/// Min/max affine variant: the row's range maps onto the full signed grid.
pub fn channel_scale_asymmetric(row: &[f64], bit: BitWidth) -> Result<ChannelQuantParams> {
    if !bit.is_grid() {
        return Err(Error::ParamsNotApplicable(bit.bits()));
    }
    let lo = row.iter().fold(0.0f64, |m, &v| m.min(v));
    let hi = row.iter().fold(0.0f64, |m, &v| m.max(v));
    let (qmin, qmax) = bit.signed_range();
    let scale = if hi > lo {
        (hi - lo) / (qmax - qmin) as f64
    } else {
        1.0
    };
    let zero_point = qmin - (lo / scale).round_ties_even() as i64;
    Ok(ChannelQuantParams {
        bit,
        scale,
        zero_point: zero_point.clamp(qmin, qmax),
    })
}

/// Integer codes `clamp(round(row / scale) + zp)` and their dequantized values
/// `(q - zp) · scale`. Rounding is half-to-even.
pub fn quantize_channel(row: &[f64], params: &ChannelQuantParams) -> (Vec<i64>, Vec<f64>) {
    let (qmin, qmax) = params.bit.signed_range();
    row.iter()
        .map(|&w| {
            let q = ((w / params.scale).round_ties_even() as i64 + params.zero_point).clamp(qmin, qmax);
            (q, (q - params.zero_point) as f64 * params.scale)
        })
        .unzip()
}

/// Dequantized row for any bit-width, plus the parameters used.
pub fn dequantize_row(row: &[f64], bit: BitWidth, scheme: WeightScheme) -> (Vec<f64>, ChannelQuantParams) {
    match bit.bits() {
        16 => (row.to_vec(), ChannelQuantParams::passthrough(bit)),
        0 => (vec![0.0; row.len()], ChannelQuantParams::passthrough(bit)),
        _ => {
            let params = match scheme {
                WeightScheme::Symmetric => channel_scale(row, bit),
                WeightScheme::Asymmetric => channel_scale_asymmetric(row, bit),
            }
            .expect("grid bit-width");
            (quantize_channel(row, &params).1, params)
        }
    }
}

/// Activation clipping range of one layer's post-activation values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationRange {
    pub lo: f64,
    pub hi: f64,
}

fn check_activation_bits(bits: BitWidth) -> Result<()> {
    if matches!(bits.bits(), 4 | 8 | 16) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "activation bits must be 4, 8 or 16, got {bits}"
        )))
    }
}

/// Linear-interpolated percentile of sorted data, `p` in [0, 100].
pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-layer `(lo, hi)` ranges: the `(100 - p)`-th and `p`-th percentiles of
/// every post-activation value observed over the calibration set.
pub fn calibrate_activations(
    model: &PolicyModel,
    calib: &CalibrationSet,
    bits: BitWidth,
    percentile: f64,
) -> Result<Vec<ActivationRange>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in (0, 100], got {percentile}"
        )));
    }
    check_activation_bits(bits)?;
    calib.validate_for(model)?;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); model.layers().len()];
    for obs in calib.observations() {
        let trace = model.forward(obs)?;
        for (v, post) in values.iter_mut().zip(trace.post) {
            v.extend(post);
        }
    }
    Ok(values
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            let a = percentile_sorted(&v, 100.0 - percentile);
            let b = percentile_sorted(&v, percentile);
            ActivationRange {
                lo: a.min(b),
                hi: a.max(b),
            }
        })
        .collect())
}

/// Asymmetric affine fake quantization onto `2^bits` levels spanning
/// `[lo, hi]`. Values are clamped first, so `lo` and `hi` map to themselves.
pub fn fake_quantize_activation(x: &[f64], lo: f64, hi: f64, bits: BitWidth) -> Vec<f64> {
    let mut out = x.to_vec();
    fake_quantize_in_place(&mut out, ActivationRange { lo, hi }, bits);
    out
}

pub(crate) fn fake_quantize_in_place(x: &mut [f64], range: ActivationRange, bits: BitWidth) {
    if bits == BitWidth::FULL {
        return;
    }
    let ActivationRange { lo, hi } = range;
    if hi <= lo {
        x.iter_mut().for_each(|v| *v = lo);
        return;
    }
    let levels = ((1u64 << bits.bits()) - 1) as f64;
    let scale = (hi - lo) / levels;
    for v in x.iter_mut() {
        let q = ((v.clamp(lo, hi) - lo) / scale).round_ties_even();
        *v = (lo + q * scale).clamp(lo, hi);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantOptions {
    pub weight_scheme: WeightScheme,
    pub percentile: f64,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            weight_scheme: WeightScheme::Symmetric,
            percentile: DEFAULT_PERCENTILE,
        }
    }
}

/// A policy with dequantized weights and fake-quantized activations.
///
/// Activation quantization applies to the post-activation outputs that feed a
/// downstream layer; the final action is left untouched.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    base: PolicyModel,
    effective: PolicyModel,
    params: BTreeMap<ChannelId, ChannelQuantParams>,
    activation_bits: BitWidth,
    activation_ranges: Vec<ActivationRange>,
}

impl QuantizedModel {
    pub fn base(&self) -> &PolicyModel {
        &self.base
    }

    /// The model with every designated row replaced by its dequantized value.
    pub fn effective(&self) -> &PolicyModel {
        &self.effective
    }

    pub fn params(&self) -> &BTreeMap<ChannelId, ChannelQuantParams> {
        &self.params
    }

    pub fn activation_bits(&self) -> BitWidth {
        self.activation_bits
    }

    pub fn activation_ranges(&self) -> &[ActivationRange] {
        &self.activation_ranges
    }

    pub fn bit_of(&self, ch: ChannelId) -> BitWidth {
        self.params.get(&ch).map_or(BitWidth::FULL, |p| p.bit)
    }
}

impl Policy for QuantizedModel {
    fn input_dim(&self) -> usize {
        self.effective.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.effective.output_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.effective.input_dim() {
            return Err(Error::Shape(format!(
                "observation has length {}, model expects {}",
                obs.len(),
                self.effective.input_dim()
            )));
        }
        let layers = self.effective.layers();
        let mut x = obs.to_vec();
        for (k, layer) in layers.iter().enumerate() {
            let mut pre = vec![0.0; layer.out_dim()];
            let mut post = vec![0.0; layer.out_dim()];
            layer.eval_into(&x, &mut pre, &mut post);
            if k + 1 < layers.len() {
                fake_quantize_in_place(&mut post, self.activation_ranges[k], self.activation_bits);
            }
            x = post;
        }
        Ok(x)
    }
}

/// Quantizes every designated channel to its assigned bit-width.
pub fn apply_allocation(
    model: &PolicyModel,
    alloc: &BitAllocation,
    act_bits: BitWidth,
    calib: &CalibrationSet,
) -> Result<QuantizedModel> {
    apply_allocation_with(model, alloc, act_bits, calib, &QuantOptions::default())
}

pub fn apply_allocation_with(
    model: &PolicyModel,
    alloc: &BitAllocation,
    act_bits: BitWidth,
    calib: &CalibrationSet,
    opts: &QuantOptions,
) -> Result<QuantizedModel> {
    check_activation_bits(act_bits)?;
    for ch in alloc.assignment().keys() {
        model
            .check_channel(*ch)
            .map_err(|_| Error::AllocationMismatch(format!("channel {ch} is not in the model")))?;
    }
    let mut effective = model.clone();
    let mut params = BTreeMap::new();
    for (&ch, &bit) in alloc.assignment() {
        let layer: &mut Layer = &mut effective.layers_mut()[ch.layer];
        let (deq, p) = dequantize_row(layer.weight.row(ch.channel), bit, opts.weight_scheme);
        layer.weight.set_row(ch.channel, &deq)?;
        if bit == BitWidth::ZERO {
            let mut bias = layer.bias.as_slice().to_vec();
            bias[ch.channel] = 0.0;
            layer.bias = crate::tensor::Vector::from_vec_unchecked(bias);
        }
        params.insert(ch, p);
    }
    let activation_ranges = if act_bits == BitWidth::FULL {
        vec![
            ActivationRange {
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY
            };
            model.layers().len()
        ]
    } else {
        calibrate_activations(model, calib, act_bits, opts.percentile)?
    };
    Ok(QuantizedModel {
        base: model.clone(),
        effective,
        params,
        activation_bits: act_bits,
        activation_ranges,
    })
}

/// One row of the bit-map file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub layer: usize,
    pub channel: usize,
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
}

/// Bit-map file: per-channel bits and weight quantization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitMap {
    pub activation_bits: u32,
    pub designated_tags: Vec<Tag>,
    pub assignments: Vec<Assignment>,
}

impl BitMap {
    pub fn from_allocation(
        model: &PolicyModel,
        alloc: &BitAllocation,
        act_bits: BitWidth,
        scheme: WeightScheme,
    ) -> Result<Self> {
        let designated: Vec<ChannelId> = alloc.designated().iter().copied().collect();
        let assignments = alloc
            .assignment()
            .iter()
            .map(|(&ch, &bit)| {
                let layer = model.check_channel(ch)?;
                let (_, p) = dequantize_row(layer.weight.row(ch.channel), bit, scheme);
                Ok(Assignment {
                    layer: ch.layer,
                    channel: ch.channel,
                    bits: bit.bits(),
                    scale: p.scale,
                    zero_point: p.zero_point,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BitMap {
            activation_bits: act_bits.bits(),
            designated_tags: model.tags_of(&designated).into_iter().collect(),
            assignments,
        })
    }

    pub fn activation_bits(&self) -> Result<BitWidth> {
        BitWidth::new(self.activation_bits)
    }

    /// Rebuilds the allocation; every listed channel is designated.
    pub fn to_allocation(&self, budget: f64) -> Result<BitAllocation> {
        let assignment = self
            .assignments
            .iter()
            .map(|a| Ok((ChannelId::new(a.layer, a.channel), BitWidth::new(a.bits)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if assignment.len() != self.assignments.len() {
            return Err(Error::AllocationMismatch("duplicate channel in bit map".into()));
        }
        BitAllocation::unchecked(assignment, budget)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bit map serialization is infallible");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}
