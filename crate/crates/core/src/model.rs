//! Policy networks as explicit chains of tagged linear layers.
//!
//! Each layer computes `post = act(W · x + b)`. Channel `(l, c)` is row `c` of
//! layer `l`'s weight matrix; its output is the post-activation value
//! `post[l][c]`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`. Relu uses the subgradient 0 at 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Which part of a vision-language-action stack a layer stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Vision,
    Projector,
    Backbone,
    ActionHead,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Vision, Tag::Projector, Tag::Backbone, Tag::ActionHead];

    /// Tags quantized by default. The projector and action head stay at full
    /// precision.
    pub const DEFAULT_DESIGNATED: [Tag; 2] = [Tag::Vision, Tag::Backbone];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Vision => "vision",
            Tag::Projector => "projector",
            Tag::Backbone => "backbone",
            Tag::ActionHead => "action_head",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
    pub tag: Tag,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vector, activation: Activation, tag: Tag) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::InvalidModel(format!(
                "weight has {} rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
            tag,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Writes `W · x + b` into `pre` and `act(pre)` into `post`.
    pub(crate) fn eval_into(&self, x: &[f64], pre: &mut [f64], post: &mut [f64]) {
        tensor::matvec_into(&self.weight, x, pre);
        for ((p, q), b) in pre.iter_mut().zip(post.iter_mut()).zip(self.bias.iter()) {
            *p += b;
            *q = self.activation.apply(*p);
        }
    }
}

/// Identifies one output channel (weight row) of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

impl ChannelId {
    pub fn new(layer: usize, channel: usize) -> Self {
        ChannelId { layer, channel }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.channel)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn action(&self) -> &[f64] {
        self.post.last().map_or(&[], Vec::as_slice)
    }

    /// Input that fed layer `layer`.
    pub fn layer_input<'a>(&'a self, obs: &'a [f64], layer: usize) -> &'a [f64] {
        if layer == 0 {
            obs
        } else {
            &self.post[layer - 1]
        }
    }
}

/// Anything that maps an observation to an action.
pub trait Policy: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn act(&self, obs: &[f64]) -> Result<Vec<f64>>;
}

/// A validated chain of layers mapping observations to actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl PolicyModel {
    pub fn new(input_dim: usize, output_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidModel("model has no layers".into()));
        };
        let mut prev = input_dim;
        for (k, layer) in layers.iter().enumerate() {
            if layer.in_dim() != prev {
                return Err(Error::InvalidModel(format!(
                    "layer {k} expects {} inputs but receives {prev}",
                    layer.in_dim()
                )));
            }
            prev = layer.out_dim();
        }
        if last.out_dim() != output_dim {
            return Err(Error::InvalidModel(format!(
                "last layer has {} outputs, output_dim is {output_dim}",
                last.out_dim()
            )));
        }
        if last.activation != Activation::Identity {
            return Err(Error::InvalidModel(
                "final layer activation must be identity".into(),
            ));
        }
        Ok(PolicyModel {
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_channels(&self) -> usize {
        self.layers.iter().map(Layer::out_dim).sum()
    }

    pub fn check_channel(&self, ch: ChannelId) -> Result<&Layer> {
        self.layers
            .get(ch.layer)
            .filter(|l| ch.channel < l.out_dim())
            .ok_or(Error::InvalidChannel {
                layer: ch.layer,
                channel: ch.channel,
            })
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "observation has length {}, model expects {}",
                obs.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, obs: &Vector) -> Result<ForwardTrace> {
        self.forward_slice(obs.as_slice())
    }

    pub fn forward_slice(&self, obs: &[f64]) -> Result<ForwardTrace> {
        self.check_obs(obs)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = post.last().map_or(obs, Vec::as_slice);
            let mut p = vec![0.0; layer.out_dim()];
            let mut q = vec![0.0; layer.out_dim()];
            layer.eval_into(x, &mut p, &mut q);
            pre.push(p);
            post.push(q);
        }
        Ok(ForwardTrace { pre, post })
    }

    /// Runs layers after `layer` starting from the given post-activation of
    /// `layer` and returns the action.
    pub fn forward_from(&self, layer: usize, post: &[f64]) -> Vec<f64> {
        let mut x = post.to_vec();
        for l in &self.layers[layer + 1..] {
            let mut p = vec![0.0; l.out_dim()];
            let mut q = vec![0.0; l.out_dim()];
            l.eval_into(&x, &mut p, &mut q);
            x = q;
        }
        x
    }

    /// Column `∂A/∂X_{l,c}` evaluated along `trace`, by the chain rule.
    pub fn jacobian_column(&self, trace: &ForwardTrace, ch: ChannelId) -> Vec<f64> {
        let mut v: Vec<f64> = Vec::new();
        for (k, layer) in self.layers.iter().enumerate().skip(ch.layer + 1) {
            let mut next = if k == ch.layer + 1 {
                layer.weight.column(ch.channel)
            } else {
                let mut out = vec![0.0; layer.out_dim()];
                tensor::matvec_into(&layer.weight, &v, &mut out);
                out
            };
            for (n, p) in next.iter_mut().zip(&trace.pre[k]) {
                *n *= layer.activation.derivative(*p);
            }
            v = next;
        }
        if ch.layer + 1 == self.layers.len() {
            v = vec![0.0; self.output_dim];
            v[ch.channel] = 1.0;
        }
        v
    }

    /// Jacobian of the action with respect to the post-activation output of
    /// channel `ch`, shaped `output_dim × 1`.
    pub fn action_jacobian_wrt_channel(&self, obs: &Vector, ch: ChannelId) -> Result<Matrix> {
        self.check_channel(ch)?;
        let trace = self.forward(obs)?;
        Matrix::new(self.output_dim, 1, self.jacobian_column(&trace, ch))
    }

    /// Central-difference counterpart of [`Self::action_jacobian_wrt_channel`].
    pub fn fd_jacobian_wrt_channel(&self, obs: &Vector, ch: ChannelId, h: f64) -> Result<Matrix> {
        if h.is_nan() || h <= 0.0 {
            return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
        }
        self.check_channel(ch)?;
        let trace = self.forward(obs)?;
        let mut post = trace.post[ch.layer].clone();
        let x0 = post[ch.channel];
        post[ch.channel] = x0 + h;
        let plus = self.forward_from(ch.layer, &post);
        post[ch.channel] = x0 - h;
        let minus = self.forward_from(ch.layer, &post);
        let col = plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect();
        Matrix::new(self.output_dim, 1, col)
    }

    /// Relative error `‖J − J_fd‖ / max(‖J‖, 1e-8)` between the analytic and
    /// central-difference Jacobians of `ch`. Returns `None` when a downstream
    /// relu pre-activation lies within `kink_margin` of 0, where the finite
    /// difference straddles the kink.
    pub fn jacobian_fd_error(&self, obs: &Vector, ch: ChannelId, h: f64, kink_margin: f64) -> Result<Option<f64>> {
        self.check_channel(ch)?;
        let trace = self.forward(obs)?;
        let near_kink = self
            .layers
            .iter()
            .enumerate()
            .skip(ch.layer + 1)
            .filter(|(_, l)| l.activation == Activation::Relu)
            .any(|(k, _)| trace.pre[k].iter().any(|p| p.abs() < kink_margin));
        if near_kink {
            return Ok(None);
        }
        let analytic = self.jacobian_column(&trace, ch);
        let fd = self.fd_jacobian_wrt_channel(obs, ch, h)?;
        let diff: Vec<f64> = analytic.iter().zip(fd.as_slice()).map(|(a, b)| a - b).collect();
        Ok(Some(tensor::l2_norm(&diff) / tensor::l2_norm(&analytic).max(1e-8)))
    }

    /// Channel ids in (layer, channel) order, optionally restricted to layers
    /// whose tag is in `tags`.
    pub fn channels(&self, tags: Option<&[Tag]>) -> Vec<ChannelId> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| tags.is_none_or(|t| t.contains(&l.tag)))
            .flat_map(|(k, l)| (0..l.out_dim()).map(move |c| ChannelId::new(k, c)))
            .collect()
    }

    pub fn tags_of(&self, channels: &[ChannelId]) -> BTreeSet<Tag> {
        channels.iter().map(|c| self.layers[c.layer].tag).collect()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ModelFile::from(self))
            .expect("model file serialization is infallible");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

impl Policy for PolicyModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        Ok(self.forward_from_input(obs))
    }
}

impl PolicyModel {
    fn forward_from_input(&self, obs: &[f64]) -> Vec<f64> {
        let mut x = obs.to_vec();
        for l in &self.layers {
            let mut p = vec![0.0; l.out_dim()];
            let mut q = vec![0.0; l.out_dim()];
            l.eval_into(&x, &mut p, &mut q);
            x = q;
        }
        x
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    tag: Tag,
    activation: Activation,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// On-disk model layout.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<LayerFile>,
}

impl From<&PolicyModel> for ModelFile {
    fn from(m: &PolicyModel) -> Self {
        ModelFile {
            input_dim: m.input_dim,
            output_dim: m.output_dim,
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    tag: l.tag,
                    activation: l.activation,
                    weight: l.weight.to_rows(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ModelFile> for PolicyModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let layers = f
            .layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| {
                let weight = Matrix::from_rows(&l.weight)
                    .map_err(|e| Error::InvalidModel(format!("layer {k}: {e}")))?;
                if weight.rows() == 0 {
                    return Err(Error::InvalidModel(format!("layer {k} has no channels")));
                }
                let bias = Vector::new(l.bias)
                    .map_err(|e| Error::InvalidModel(format!("layer {k}: {e}")))?;
                Layer::new(weight, bias, l.activation, l.tag)
            })
            .collect::<Result<Vec<_>>>()?;
        PolicyModel::new(f.input_dim, f.output_dim, layers)
    }
}
