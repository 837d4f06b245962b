//! Action-space sensitivity of individual channels.
//!
//! A channel's score at bit-width `b` measures how far the action moves when
//! only that channel is quantized to `b` bits:
//!
//! * exact single-step: `E_x ‖Ã(x) − A(x)‖²` over the calibration set;
//! * cumulative: `E Σ_t ‖Ã_t − A_t‖` over closed-loop episodes;
//! * proxy: `σ² · E‖J‖²`, the first-order estimate built from the Jacobian of
//!   the action with respect to the channel's linear output and the variance
//!   of the output deviation induced by weight quantization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelId, ForwardTrace, PolicyModel};
use crate::quant::{dequantize_row, BitWidth, ChannelQuantParams, WeightScheme};
use crate::simenv::{Environment, Stream};
use crate::tensor::{self, Vector};

/// Default number of calibration trajectories.
pub const DEFAULT_CALIB_TRAJECTORIES: usize = 512;
/// Default number of episodes for the cumulative metric.
pub const DEFAULT_EPISODES: usize = 16;

/// Observations over which sensitivity expectations are taken.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    observations: Vec<Vector>,
    source_trajectories: usize,
    seed: u64,
}

impl CalibrationSet {
    pub fn new(observations: Vec<Vector>, source_trajectories: usize, seed: u64) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        let dim = observations[0].len();
        if observations.iter().any(|o| o.len() != dim) {
            return Err(Error::Shape("calibration observations differ in length".into()));
        }
        Ok(CalibrationSet {
            observations,
            source_trajectories,
            seed,
        })
    }

    pub fn observations(&self) -> &[Vector] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn source_trajectories(&self) -> usize {
        self.source_trajectories
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn validate_for(&self, model: &PolicyModel) -> Result<()> {
        if self.observations[0].len() != model.input_dim() {
            return Err(Error::Shape(format!(
                "calibration observations have length {}, model expects {}",
                self.observations[0].len(),
                model.input_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactSingleStep,
    Proxy,
    Cumulative,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ExactSingleStep => "exact_single_step",
            Method::Proxy => "proxy",
            Method::Cumulative => "cumulative",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::ExactSingleStep, Method::Proxy, Method::Cumulative]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub score: f64,
    pub method: Method,
}

/// Scores per (channel, bit-width). Bit 16 is implicit with score 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensitivityTable {
    entries: BTreeMap<(ChannelId, BitWidth), Entry>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    layer: usize,
    channel: usize,
    bits: u32,
    score: String,
    method: String,
}

impl SensitivityTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry. Bit 16 is rejected unless the score is 0.
    pub fn insert(&mut self, ch: ChannelId, bit: BitWidth, score: f64, method: Method) -> Result<()> {
        if !score.is_finite() || score < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "score for {ch} at {bit} bits must be finite and non-negative, got {score}"
            )));
        }
        if bit == BitWidth::FULL {
            if score != 0.0 {
                return Err(Error::InvalidArgument("16-bit scores are 0 by definition".into()));
            }
            return Ok(());
        }
        self.entries.insert((ch, bit), Entry { score, method });
        Ok(())
    }

    pub fn entry(&self, ch: ChannelId, bit: BitWidth) -> Option<Entry> {
        if bit == BitWidth::FULL {
            return Some(Entry {
                score: 0.0,
                method: Method::ExactSingleStep,
            });
        }
        self.entries.get(&(ch, bit)).copied()
    }

    pub fn score(&self, ch: ChannelId, bit: BitWidth) -> Option<f64> {
        self.entry(ch, bit).map(|e| e.score)
    }

    pub fn require(&self, ch: ChannelId, bit: BitWidth) -> Result<f64> {
        self.score(ch, bit).ok_or(Error::MissingEntry {
            layer: ch.layer,
            channel: ch.channel,
            bits: bit.bits(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ChannelId, BitWidth, Entry)> + '_ {
        self.entries.iter().map(|(&(c, b), &e)| (c, b, e))
    }

    /// Distinct channels in ascending order.
    pub fn channels(&self) -> Vec<ChannelId> {
        let mut out: Vec<ChannelId> = self.entries.keys().map(|(c, _)| *c).collect();
        out.dedup();
        out
    }

    /// Every channel must have entries for bits {0, 2, 4, 8}.
    pub fn check_complete(&self, channels: &[ChannelId]) -> Result<()> {
        for &ch in channels {
            for bit in BitWidth::SCORED {
                self.require(ch, bit)?;
            }
        }
        Ok(())
    }

    /// CSV with header `layer,channel,bits,score,method`; scores carry 17
    /// significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (ch, bit, e) in self.iter() {
            w.serialize(CsvRow {
                layer: ch.layer,
                channel: ch.channel,
                bits: bit.bits(),
                score: format!("{:.16e}", e.score),
                method: e.method.as_str().to_string(),
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("ascii csv")
    }

    pub fn from_csv_str(s: &str, file: &str) -> Result<Self> {
        let parse_err = |line: u64, message: String| Error::Parse {
            file: file.to_string(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().from_reader(s.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["layer", "channel", "bits", "score", "method"] {
            return Err(parse_err(
                1,
                format!("expected header layer,channel,bits,score,method, found {:?}", headers.as_slice()),
            ));
        }
        let mut table = SensitivityTable::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let row: CsvRow = record
                .deserialize(Some(&headers))
                .map_err(|e| parse_err(line, e.to_string()))?;
            let bit = BitWidth::new(row.bits).map_err(|e| parse_err(line, e.to_string()))?;
            let score: f64 = row
                .score
                .parse()
                .map_err(|_| parse_err(line, format!("invalid score {:?}", row.score)))?;
            let method: Method = row.method.parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
            let ch = ChannelId::new(row.layer, row.channel);
            if table.entries.contains_key(&(ch, bit)) {
                return Err(parse_err(line, format!("duplicate entry for {ch} at {bit} bits")));
            }
            table
                .insert(ch, bit, score, method)
                .map_err(|e| parse_err(line, e.to_string()))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&s, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Norm used to accumulate single-step action deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deviation {
    /// `‖ΔA‖²`
    Squared,
    /// `‖ΔA‖`
    Norm,
}

/// Model plus cached forward traces of every calibration observation.
pub struct SensitivityEngine<'a> {
    model: &'a PolicyModel,
    calib: &'a CalibrationSet,
    traces: Vec<ForwardTrace>,
    scheme: WeightScheme,
}

impl<'a> SensitivityEngine<'a> {
    pub fn new(model: &'a PolicyModel, calib: &'a CalibrationSet) -> Result<Self> {
        calib.validate_for(model)?;
        let traces = calib
            .observations()
            .par_iter()
            .map(|o| model.forward(o))
            .collect::<Result<Vec<_>>>()?;
        Ok(SensitivityEngine {
            model,
            calib,
            traces,
            scheme: WeightScheme::Symmetric,
        })
    }

    pub fn with_scheme(mut self, scheme: WeightScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn model(&self) -> &PolicyModel {
        self.model
    }

    /// Dequantized row and bias entry of `ch` at `bit`.
    fn perturbed_row(&self, ch: ChannelId, bit: BitWidth) -> (Vec<f64>, f64, ChannelQuantParams) {
        let layer = &self.model.layers()[ch.layer];
        let (row, params) = dequantize_row(layer.weight.row(ch.channel), bit, self.scheme);
        let bias = if bit == BitWidth::ZERO {
            0.0
        } else {
            layer.bias[ch.channel]
        };
        (row, bias, params)
    }

    /// Action deviation when channel `ch` of `trace` outputs `new_post`.
    fn action_delta_sq(&self, trace: &ForwardTrace, ch: ChannelId, new_post: f64) -> f64 {
        let delta = new_post - trace.post[ch.layer][ch.channel];
        if delta == 0.0 {
            return 0.0;
        }
        let layers = self.model.layers();
        if ch.layer + 1 == layers.len() {
            return delta * delta;
        }
        let next = &layers[ch.layer + 1];
        let w = next.weight.as_slice();
        let cols = next.in_dim();
        let mut x: Vec<f64> = trace.pre[ch.layer + 1]
            .iter()
            .enumerate()
            .map(|(i, p)| next.activation.apply(p + w[i * cols + ch.channel] * delta))
            .collect();
        for layer in &layers[ch.layer + 2..] {
            let mut pre = vec![0.0; layer.out_dim()];
            let mut post = vec![0.0; layer.out_dim()];
            layer.eval_into(&x, &mut pre, &mut post);
            x = post;
        }
        tensor::sq_dist(&x, trace.action())
    }

    /// Mean single-step action deviation over the calibration set.
    pub fn single_step(&self, ch: ChannelId, bit: BitWidth, dev: Deviation) -> Result<f64> {
        self.model.check_channel(ch)?;
        if bit == BitWidth::FULL {
            return Ok(0.0);
        }
        let (row, bias, _) = self.perturbed_row(ch, bit);
        let act = self.model.layers()[ch.layer].activation;
        let total: f64 = self
            .traces
            .iter()
            .zip(self.calib.observations())
            .map(|(trace, obs)| {
                let x = trace.layer_input(obs.as_slice(), ch.layer);
                let new_post = act.apply(tensor::dot(&row, x) + bias);
                let d2 = self.action_delta_sq(trace, ch, new_post);
                match dev {
                    Deviation::Squared => d2,
                    Deviation::Norm => d2.sqrt(),
                }
            })
            .sum();
        Ok(total / self.traces.len() as f64)
    }

    pub fn exact(&self, ch: ChannelId, bit: BitWidth) -> Result<f64> {
        self.single_step(ch, bit, Deviation::Squared)
    }

    /// `E‖J‖²` where `J` is the Jacobian of the action with respect to the
    /// channel's pre-activation (linear) output.
    pub fn jacobian_gain(&self, ch: ChannelId) -> Result<f64> {
        self.model.check_channel(ch)?;
        let act = self.model.layers()[ch.layer].activation;
        let total: f64 = self
            .traces
            .iter()
            .map(|t| {
                let local = act.derivative(t.pre[ch.layer][ch.channel]);
                let col = self.model.jacobian_column(t, ch);
                local * local * tensor::dot(&col, &col)
            })
            .sum();
        Ok(total / self.traces.len() as f64)
    }

    /// Second moment of the channel's pre-activation deviation
    /// `(Q(w) − w) · x` over the calibration set.
    pub fn induced_noise_var(&self, ch: ChannelId, bit: BitWidth) -> Result<f64> {
        self.model.check_channel(ch)?;
        let w = self.model.layers()[ch.layer].weight.row(ch.channel);
        let (row, _, _) = self.perturbed_row(ch, bit);
        let diff: Vec<f64> = row.iter().zip(w).map(|(q, w)| q - w).collect();
        let total: f64 = self
            .traces
            .iter()
            .zip(self.calib.observations())
            .map(|(t, obs)| {
                let d = tensor::dot(&diff, t.layer_input(obs.as_slice(), ch.layer));
                d * d
            })
            .sum();
        Ok(total / self.traces.len() as f64)
    }

    pub fn proxy(&self, ch: ChannelId, bit: BitWidth) -> Result<f64> {
        match bit.bits() {
            16 => Ok(0.0),
            0 => Err(Error::InvalidArgument(
                "the first-order proxy is not valid for pruning (0 bits)".into(),
            )),
            _ => Ok(self.induced_noise_var(ch, bit)? * self.jacobian_gain(ch)?),
        }
    }

    /// Proxy scores for all grid bits from one Jacobian pass.
    fn proxy_all(&self, ch: ChannelId) -> Result<[f64; 3]> {
        let gain = self.jacobian_gain(ch)?;
        let mut out = [0.0; 3];
        for (o, bit) in out.iter_mut().zip(BitWidth::GRID) {
            *o = self.induced_noise_var(ch, bit)? * gain;
        }
        Ok(out)
    }

    /// Exact scores for every channel at bits {0, 2, 4, 8}.
    pub fn exact_table(&self, channels: &[ChannelId]) -> Result<SensitivityTable> {
        let rows = channels
            .par_iter()
            .map(|&ch| {
                BitWidth::SCORED
                    .iter()
                    .map(|&b| Ok((ch, b, self.exact(ch, b)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = SensitivityTable::new();
        for (ch, b, s) in rows.into_iter().flatten() {
            table.insert(ch, b, s, Method::ExactSingleStep)?;
        }
        Ok(table)
    }

    /// Proxy screening followed by exact refinement of the most sensitive
    /// `refine_fraction` of channels (ranked by proxy at 2 bits). Bit 0 is
    /// always exact.
    pub fn two_stage(&self, channels: &[ChannelId], refine_fraction: f64) -> Result<SensitivityTable> {
        if !(refine_fraction > 0.0 && refine_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "refine fraction must be in (0, 1], got {refine_fraction}"
            )));
        }
        let screened = channels
            .par_iter()
            .map(|&ch| Ok((ch, self.proxy_all(ch)?, self.exact(ch, BitWidth::ZERO)?)))
            .collect::<Result<Vec<_>>>()?;

        let mut order: Vec<usize> = (0..screened.len()).collect();
        order.sort_by(|&a, &b| {
            screened[b].1[0]
                .total_cmp(&screened[a].1[0])
                .then(screened[a].0.cmp(&screened[b].0))
        });
        let n_refine = ((refine_fraction * channels.len() as f64) + 1e-9).floor() as usize;
        let refine: Vec<ChannelId> = order[..n_refine.min(order.len())]
            .iter()
            .map(|&i| screened[i].0)
            .collect();
        let refined = refine
            .par_iter()
            .map(|&ch| {
                BitWidth::GRID
                    .iter()
                    .map(|&b| Ok((ch, b, self.exact(ch, b)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut table = SensitivityTable::new();
        for (ch, proxies, s0) in &screened {
            table.insert(*ch, BitWidth::ZERO, *s0, Method::ExactSingleStep)?;
            for (bit, p) in BitWidth::GRID.iter().zip(proxies) {
                table.insert(*ch, *bit, *p, Method::Proxy)?;
            }
        }
        for (ch, b, s) in refined.into_iter().flatten() {
            table.insert(ch, b, s, Method::ExactSingleStep)?;
        }
        Ok(table)
    }
}

/// `E_x ‖Ã(x) − A(x)‖²` with only `ch` quantized to `bit`.
pub fn exact_single_step(
    model: &PolicyModel,
    calib: &CalibrationSet,
    ch: ChannelId,
    bit: BitWidth,
) -> Result<f64> {
    SensitivityEngine::new(model, calib)?.exact(ch, bit)
}

/// First-order estimate `σ² · E‖J‖²`; undefined for 0 bits.
pub fn proxy_sensitivity(
    model: &PolicyModel,
    calib: &CalibrationSet,
    ch: ChannelId,
    bit: BitWidth,
) -> Result<f64> {
    SensitivityEngine::new(model, calib)?.proxy(ch, bit)
}

pub fn two_stage_scores(
    model: &PolicyModel,
    calib: &CalibrationSet,
    channels: &[ChannelId],
    refine_fraction: f64,
) -> Result<SensitivityTable> {
    SensitivityEngine::new(model, calib)?.two_stage(channels, refine_fraction)
}

/// Standard deviation of uniform rounding noise over one quantization step.
pub fn quant_noise_std(params: &ChannelQuantParams) -> Result<f64> {
    if !params.bit.is_grid() {
        return Err(Error::ParamsNotApplicable(params.bit.bits()));
    }
    Ok(params.scale / 12f64.sqrt())
}

/// Copy of `model` with only `ch` quantized to `bit`.
pub fn quantize_single_channel(model: &PolicyModel, ch: ChannelId, bit: BitWidth) -> Result<PolicyModel> {
    model.check_channel(ch)?;
    let mut m = model.clone();
    let layer = &mut m.layers_mut()[ch.layer];
    let (row, _) = dequantize_row(layer.weight.row(ch.channel), bit, WeightScheme::Symmetric);
    layer.weight.set_row(ch.channel, &row)?;
    if bit == BitWidth::ZERO {
        let mut bias = layer.bias.as_slice().to_vec();
        bias[ch.channel] = 0.0;
        layer.bias = Vector::new(bias)?;
    }
    Ok(m)
}

/// Closed-loop settings for the cumulative metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulativeConfig {
    pub horizon: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// `E Σ_{t<T} ‖Ã_t − A_t‖`: the channel-perturbed policy drives the
/// environment and the full-precision action is recomputed on the same state
/// at every step.
pub fn cumulative_sensitivity(
    model: &PolicyModel,
    env: &Environment,
    ch: ChannelId,
    bit: BitWidth,
    cfg: &CumulativeConfig,
) -> Result<f64> {
    if cfg.horizon == 0 || cfg.episodes == 0 {
        return Err(Error::InvalidArgument("horizon and episodes must be >= 1".into()));
    }
    env.check_policy(model)?;
    if bit == BitWidth::FULL {
        return Ok(0.0);
    }
    let perturbed = quantize_single_channel(model, ch, bit)?;
    let mut total = 0.0;
    for ep in 0..cfg.episodes {
        let mut state = env.initial_state(cfg.seed, Stream::Rollout, ep as u64);
        for _ in 0..cfg.horizon {
            let obs = env.observe(&state);
            let a_q = crate::model::Policy::act(&perturbed, &obs)?;
            let a_fp = crate::model::Policy::act(model, &obs)?;
            total += tensor::sq_dist(&a_q, &a_fp).sqrt();
            state = env.step(&state, &a_q)?;
        }
    }
    Ok(total / cfg.episodes as f64)
}

/// Cumulative scores for every channel at the given bits.
pub fn cumulative_table(
    model: &PolicyModel,
    env: &Environment,
    channels: &[ChannelId],
    bits: &[BitWidth],
    cfg: &CumulativeConfig,
) -> Result<SensitivityTable> {
    let rows = channels
        .par_iter()
        .flat_map_iter(|&ch| bits.iter().map(move |&b| (ch, b)))
        .map(|(ch, b)| Ok((ch, b, cumulative_sensitivity(model, env, ch, b, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut table = SensitivityTable::new();
    for (ch, b, s) in rows {
        table.insert(ch, b, s, Method::Cumulative)?;
    }
    Ok(table)
}

/// Average ranks (1-based); ties share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rank correlation needs at least 3 channels, got {}",
            a.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidArgument("rank correlation of constant scores".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation between two tables' scores at `bit` over the same
/// channels.
pub fn rank_consistency(single: &SensitivityTable, cumul: &SensitivityTable, bit: BitWidth) -> Result<f64> {
    let channels: Vec<ChannelId> = single
        .channels()
        .into_iter()
        .filter(|&c| single.score(c, bit).is_some())
        .collect();
    let other: Vec<ChannelId> = cumul
        .channels()
        .into_iter()
        .filter(|&c| cumul.score(c, bit).is_some())
        .collect();
    if channels != other {
        return Err(Error::InvalidArgument(format!(
            "tables cover different channels at {bit} bits"
        )));
    }
    let a: Vec<f64> = channels.iter().map(|&c| single.require(c, bit)).collect::<Result<_>>()?;
    let b: Vec<f64> = channels.iter().map(|&c| cumul.require(c, bit)).collect::<Result<_>>()?;
    spearman(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer, Tag};
    use crate::quant::channel_scale;
    use crate::simenv::{EnvConfig, OBS_DIM};
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, out: usize, inp: usize, act: Activation, tag: Tag) -> Layer {
        let w: Vec<f64> = (0..out * inp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..out).map(|_| rng.random_range(-0.2..0.2)).collect();
        Layer::new(Matrix::new(out, inp, w).unwrap(), Vector::new(b).unwrap(), act, tag).unwrap()
    }

    fn random_model(seed: u64, act: Activation, input: usize, hidden: &[usize], output: usize) -> PolicyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(random_layer(&mut rng, h, prev, act, Tag::Backbone));
            prev = h;
        }
        layers.push(random_layer(&mut rng, output, prev, Activation::Identity, Tag::ActionHead));
        PolicyModel::new(input, output, layers).unwrap()
    }

    fn random_calib(seed: u64, dim: usize, n: usize) -> CalibrationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = (0..n)
            .map(|_| Vector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        CalibrationSet::new(obs, 1, seed).unwrap()
    }

    #[test]
    fn calibration_set_validation() {
        assert!(matches!(CalibrationSet::new(vec![], 0, 0), Err(Error::EmptyCalibration)));
        let ragged = vec![Vector::zeros(2), Vector::zeros(3)];
        assert!(CalibrationSet::new(ragged, 1, 0).is_err());
        let model = random_model(0, Activation::Tanh, 3, &[4], 2);
        let calib = random_calib(0, 2, 8);
        assert!(SensitivityEngine::new(&model, &calib).is_err());
    }

    #[test]
    fn full_precision_scores_zero() {
        let model = random_model(1, Activation::Tanh, 3, &[5, 4], 2);
        let calib = random_calib(1, 3, 64);
        let eng = SensitivityEngine::new(&model, &calib).unwrap();
        for ch in model.channels(None) {
            assert_eq!(eng.exact(ch, BitWidth::FULL).unwrap(), 0.0);
            assert_eq!(eng.proxy(ch, BitWidth::FULL).unwrap(), 0.0);
        }
    }

    #[test]
    fn dead_channel_prunes_for_free() {
        let mut model = random_model(2, Activation::Tanh, 3, &[4], 2);
        let head = &mut model.layers_mut()[1];
        let mut rows = head.weight.to_rows();
        for r in &mut rows {
            r[1] = 0.0;
        }
        head.weight = Matrix::from_rows(&rows).unwrap();
        let calib = random_calib(2, 3, 64);
        let eng = SensitivityEngine::new(&model, &calib).unwrap();
        let dead = ChannelId::new(0, 1);
        assert_eq!(eng.exact(dead, BitWidth::ZERO).unwrap(), 0.0);
        assert_eq!(eng.proxy(dead, BitWidth::FOUR).unwrap(), 0.0);
        assert!(eng.exact(ChannelId::new(0, 0), BitWidth::ZERO).unwrap() > 0.0);
    }

    #[test]
    fn single_linear_layer_pruning_matches_scalar_oracle() {
        let w = [0.7, -1.3, 0.25];
        let layer = Layer::new(
            Matrix::new(1, 3, w.to_vec()).unwrap(),
            Vector::new(vec![0.0]).unwrap(),
            Activation::Identity,
            Tag::ActionHead,
        )
        .unwrap();
        let model = PolicyModel::new(3, 1, vec![layer]).unwrap();
        let calib = random_calib(3, 3, 200);
        let oracle: f64 = calib
            .observations()
            .iter()
            .map(|x| {
                let y: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                y * y
            })
            .sum::<f64>()
            / 200.0;
        let got = exact_single_step(&model, &calib, ChannelId::new(0, 0), BitWidth::ZERO).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn exact_matches_full_requantized_forward() {
        let model = random_model(4, Activation::Tanh, 3, &[6, 5], 2);
        let calib = random_calib(4, 3, 50);
        let eng = SensitivityEngine::new(&model, &calib).unwrap();
        for ch in [ChannelId::new(0, 2), ChannelId::new(1, 4), ChannelId::new(2, 1)] {
            for bit in BitWidth::SCORED {
                let q = quantize_single_channel(&model, ch, bit).unwrap();
                let direct: f64 = calib
                    .observations()
                    .iter()
                    .map(|x| {
                        let a = model.forward(x).unwrap();
                        let b = q.forward(x).unwrap();
                        tensor::sq_dist(a.action(), b.action())
                    })
                    .sum::<f64>()
                    / 50.0;
                let fast = eng.exact(ch, bit).unwrap();
                assert!((fast - direct).abs() <= 1e-12 * direct.max(1e-300), "{ch} {bit}: {fast} vs {direct}");
            }
        }
    }

    #[test]
    fn exact_monotone_in_bits_on_random_models() {
        let (mut checked, mut violations) = (0, 0);
        for seed in 0..10 {
            let model = random_model(100 + seed, Activation::Tanh, 4, &[8, 8], 2);
            let calib = random_calib(seed, 4, 64);
            let table = SensitivityEngine::new(&model, &calib)
                .unwrap()
                .exact_table(&model.channels(None))
                .unwrap();
            for ch in table.channels() {
                let s = |b| table.score(ch, b).unwrap();
                assert!(s(BitWidth::EIGHT) >= 0.0);
                checked += 1;
                if s(BitWidth::FOUR) < s(BitWidth::EIGHT) || s(BitWidth::TWO) < s(BitWidth::FOUR) {
                    violations += 1;
                }
            }
        }
        assert!(violations as f64 <= 0.05 * checked as f64, "{violations}/{checked}");
    }

    #[test]
    fn quant_noise_std_formula() {
        let p = |scale, bits| ChannelQuantParams {
            bit: BitWidth::new(bits).unwrap(),
            scale,
            zero_point: 0,
        };
        assert!((quant_noise_std(&p(1.0, 8)).unwrap() - 0.288_675_134_594_812_9).abs() < 1e-15);
        assert_eq!(quant_noise_std(&p(0.5, 4)).unwrap(), quant_noise_std(&p(1.0, 4)).unwrap() / 2.0);
        assert!(matches!(quant_noise_std(&ChannelQuantParams::passthrough(BitWidth::ZERO)), Err(Error::ParamsNotApplicable(0))));
        assert!(matches!(quant_noise_std(&ChannelQuantParams::passthrough(BitWidth::FULL)), Err(Error::ParamsNotApplicable(16))));
    }

    #[test]
    fn quant_noise_std_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut sq, mut predicted, mut n) = (0.0, 0.0, 0usize);
        for _ in 0..100 {
            let row: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (deq, params) = dequantize_row(&row, BitWidth::EIGHT, WeightScheme::Symmetric);
            for (d, w) in deq.iter().zip(&row) {
                sq += (d - w) * (d - w);
                n += 1;
            }
            predicted += quant_noise_std(&params).unwrap().powi(2) * 100.0;
        }
        let (emp, pred) = ((sq / n as f64).sqrt(), (predicted / n as f64).sqrt());
        assert!((emp - pred).abs() <= 0.15 * pred, "empirical {emp} vs model {pred}");
    }

    #[test]
    fn proxy_is_exact_on_linear_models() {
        let model = random_model(5, Activation::Identity, 4, &[6, 5], 3);
        let calib = random_calib(5, 4, 256);
        let eng = SensitivityEngine::new(&model, &calib).unwrap();
        for ch in model.channels(None) {
            for bit in BitWidth::GRID {
                let (p, e) = (eng.proxy(ch, bit).unwrap(), eng.exact(ch, bit).unwrap());
                assert!((p - e).abs() <= 0.2 * e, "{ch} {bit}: proxy {p} exact {e}");
            }
        }
    }

    #[test]
    fn proxy_rejects_pruning() {
        let model = random_model(6, Activation::Tanh, 2, &[3], 1);
        let calib = random_calib(6, 2, 8);
        assert!(proxy_sensitivity(&model, &calib, ChannelId::new(0, 0), BitWidth::ZERO).is_err());
    }

    #[test]
    fn proxy_scales_quadratically_with_downstream_weights() {
        let model = random_model(7, Activation::Identity, 3, &[4], 2);
        let mut doubled = model.clone();
        let head = &mut doubled.layers_mut()[1];
        head.weight = head.weight.scaled(2.0).unwrap();
        let calib = random_calib(7, 3, 64);
        for c in 0..4 {
            let ch = ChannelId::new(0, c);
            let a = proxy_sensitivity(&model, &calib, ch, BitWidth::FOUR).unwrap();
            let b = proxy_sensitivity(&doubled, &calib, ch, BitWidth::FOUR).unwrap();
            assert!((b - 4.0 * a).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn proxy_tracks_exact_on_nonlinear_models() {
        let model = random_model(8, Activation::Tanh, 4, &[12, 12], 2);
        let calib = random_calib(8, 4, 256);
        let eng = SensitivityEngine::new(&model, &calib).unwrap();
        let channels = model.channels(None);
        let exact = eng.exact_table(&channels).unwrap();
        let full = eng.two_stage(&channels, 1.0).unwrap();
        let mut proxy = SensitivityTable::new();
        for &ch in &channels {
            proxy.insert(ch, BitWidth::FOUR, eng.proxy(ch, BitWidth::FOUR).unwrap(), Method::Proxy).unwrap();
        }
        assert!(rank_consistency(&exact, &proxy, BitWidth::FOUR).unwrap() >= 0.8);
        assert_eq!(full, exact);
    }

    #[test]
    fn two_stage_refinement_boundaries() {
        let model = random_model(9, Activation::Tanh, 3, &[5, 4], 2);
        let calib = random_calib(9, 3, 32);
        let channels = model.channels(None);
        let all = two_stage_scores(&model, &calib, &channels, 1.0).unwrap();
        assert!(all.iter().all(|(_, _, e)| e.method == Method::ExactSingleStep));
        assert_eq!(all.len(), channels.len() * 4);

        let none = two_stage_scores(&model, &calib, &channels, 1e-6).unwrap();
        for (_, bit, e) in none.iter() {
            let expected = if bit == BitWidth::ZERO { Method::ExactSingleStep } else { Method::Proxy };
            assert_eq!(e.method, expected);
        }

        let half = two_stage_scores(&model, &calib, &channels, 0.5).unwrap();
        let refined: Vec<ChannelId> = channels
            .iter()
            .copied()
            .filter(|&c| half.entry(c, BitWidth::TWO).unwrap().method == Method::ExactSingleStep)
            .collect();
        assert_eq!(refined.len(), channels.len() / 2);
        let proxy2 = |c| none.score(c, BitWidth::TWO).unwrap();
        let min_refined = refined.iter().map(|&c| proxy2(c)).fold(f64::INFINITY, f64::min);
        for c in channels.iter().filter(|c| !refined.contains(c)) {
            assert!(proxy2(*c) <= min_refined);
        }

        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(two_stage_scores(&model, &calib, &channels, bad).is_err());
        }
    }

    #[test]
    fn spearman_examples() {
        let a = [0.3, 1.0, 0.1, 7.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() - 0.948_683_298_050_513_8).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rank_consistency_requires_same_channels() {
        let mut a = SensitivityTable::new();
        let mut b = SensitivityTable::new();
        for c in 0..4 {
            a.insert(ChannelId::new(0, c), BitWidth::FOUR, c as f64, Method::ExactSingleStep).unwrap();
            b.insert(ChannelId::new(0, c), BitWidth::FOUR, (c * c) as f64, Method::Cumulative).unwrap();
        }
        assert!((rank_consistency(&a, &b, BitWidth::FOUR).unwrap() - 1.0).abs() < 1e-15);
        b.insert(ChannelId::new(1, 0), BitWidth::FOUR, 1.0, Method::Cumulative).unwrap();
        assert!(rank_consistency(&a, &b, BitWidth::FOUR).is_err());
    }

    #[test]
    fn table_insert_rules() {
        let mut t = SensitivityTable::new();
        let ch = ChannelId::new(0, 0);
        assert!(t.insert(ch, BitWidth::FOUR, -1.0, Method::Proxy).is_err());
        assert!(t.insert(ch, BitWidth::FOUR, f64::NAN, Method::Proxy).is_err());
        assert!(t.insert(ch, BitWidth::FULL, 0.5, Method::Proxy).is_err());
        t.insert(ch, BitWidth::FULL, 0.0, Method::Proxy).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.score(ch, BitWidth::FULL), Some(0.0));
        assert!(matches!(t.check_complete(&[ch]), Err(Error::MissingEntry { bits: 0, .. })));
    }

    #[test]
    fn table_csv_round_trip_is_bit_exact() {
        let mut t = SensitivityTable::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for c in 0..5 {
            for bit in BitWidth::SCORED {
                let s = rng.random::<f64>() * 10f64.powi(rng.random_range(-12..3));
                t.insert(ChannelId::new(c % 2, c), bit, s, Method::Proxy).unwrap();
            }
        }
        let csv = t.to_csv_string();
        assert!(csv.starts_with("layer,channel,bits,score,method\n"));
        let back = SensitivityTable::from_csv_str(&csv, "t.csv").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_csv_string(), csv);
        let first = csv.lines().nth(1).unwrap().split(',').nth(3).unwrap();
        let mantissa = first.split('e').next().unwrap().replace('.', "");
        assert_eq!(mantissa.len(), 17);
    }

    #[test]
    fn table_csv_errors_carry_line_numbers() {
        let cases = [
            ("layer,channel,bit,score,method\n", 1),
            ("layer,channel,bits,score,method\n0,0,4,0.5,proxy\n0,0,3,0.5,proxy\n", 3),
            ("layer,channel,bits,score,method\n0,0,4,abc,proxy\n", 2),
            ("layer,channel,bits,score,method\n0,0,4,0.5,guess\n", 2),
            ("layer,channel,bits,score,method\n0,0,4,0.5,proxy\n0,0,4,0.7,proxy\n", 3),
            ("layer,channel,bits,score,method\n0,0,4,-1,proxy\n", 2),
            ("layer,channel,bits,score,method\n0,0,4\n", 2),
        ];
        for (text, want) in cases {
            match SensitivityTable::from_csv_str(text, "s.csv") {
                Err(Error::Parse { file, line, .. }) => {
                    assert_eq!(file, "s.csv");
                    assert_eq!(line, want, "{text:?}");
                }
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    fn point_mass_model(seed: u64) -> PolicyModel {
        random_model(seed, Activation::Tanh, OBS_DIM, &[6, 6], 2)
    }

    #[test]
    fn cumulative_scores_basic() {
        let model = point_mass_model(11);
        let env = Environment::new(EnvConfig::default()).unwrap();
        let cfg = CumulativeConfig { horizon: 8, episodes: 4, seed: 3 };
        let ch = ChannelId::new(1, 2);
        assert_eq!(cumulative_sensitivity(&model, &env, ch, BitWidth::FULL, &cfg).unwrap(), 0.0);
        let s = cumulative_sensitivity(&model, &env, ch, BitWidth::TWO, &cfg).unwrap();
        assert!(s > 0.0);
        assert_eq!(s, cumulative_sensitivity(&model, &env, ch, BitWidth::TWO, &cfg).unwrap());
        let bad = CumulativeConfig { horizon: 0, ..cfg };
        assert!(cumulative_sensitivity(&model, &env, ch, BitWidth::TWO, &bad).is_err());
        let wrong = random_model(1, Activation::Tanh, 3, &[4], 2);
        assert!(cumulative_sensitivity(&wrong, &env, ChannelId::new(0, 0), BitWidth::TWO, &cfg).is_err());
    }

    #[test]
    fn cumulative_with_one_step_is_unsquared_single_step() {
        let model = point_mass_model(12);
        let env = Environment::new(EnvConfig::default()).unwrap();
        let cfg = CumulativeConfig { horizon: 1, episodes: 40, seed: 5 };
        let starts: Vec<Vector> = (0..cfg.episodes as u64)
            .map(|i| Vector::new(env.observe(&env.initial_state(cfg.seed, Stream::Rollout, i))).unwrap())
            .collect();
        let calib = CalibrationSet::new(starts, cfg.episodes, cfg.seed).unwrap();
        let eng = SensitivityEngine::new(&model, &calib).unwrap();
        let channels = model.channels(None);
        let cumul = cumulative_table(&model, &env, &channels, &[BitWidth::FOUR], &cfg).unwrap();
        let mut norm = SensitivityTable::new();
        let mut squared = SensitivityTable::new();
        for &ch in &channels {
            let n = eng.single_step(ch, BitWidth::FOUR, Deviation::Norm).unwrap();
            let c = cumul.score(ch, BitWidth::FOUR).unwrap();
            assert!((n - c).abs() <= 1e-12 * c.max(1e-300), "{ch}: {n} vs {c}");
            norm.insert(ch, BitWidth::FOUR, n, Method::ExactSingleStep).unwrap();
            squared.insert(ch, BitWidth::FOUR, eng.exact(ch, BitWidth::FOUR).unwrap(), Method::ExactSingleStep).unwrap();
        }
        assert!(rank_consistency(&squared, &cumul, BitWidth::FOUR).unwrap() >= 0.8);
    }

    #[test]
    fn channel_scale_feeds_noise_model() {
        let row = [0.5, -1.0, 0.25];
        let p = channel_scale(&row, BitWidth::FOUR).unwrap();
        assert!((quant_noise_std(&p).unwrap() - (1.0 / 7.0) / 12f64.sqrt()).abs() < 1e-15);
    }
}
