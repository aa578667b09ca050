//! Layer graphs, parameters, and the forward/backward passes over them.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, BatchNormCache, ConvGeometry};
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    },
    TransposedConv {
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    },
    BatchNorm {
        ch: usize,
        momentum: f32,
        eps: f32,
    },
    Relu,
    AvgPool {
        k: usize,
    },
    Dropout {
        rate: f32,
    },
    /// Appends the channels of the tagged layer's output.
    Concat {
        source: String,
    },
}

impl LayerSpec {
    fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv { kernel, stride, pad, .. } | LayerSpec::TransposedConv { kernel, stride, pad, .. } => {
                Some(ConvGeometry { kernel, stride, pad })
            }
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::TransposedConv { .. } => "transposed_conv",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Concat { .. } => "concat",
        }
    }
}

/// A layer plus an optional tag naming its output as a skip source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub layer: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl From<LayerSpec> for Node {
    fn from(layer: LayerSpec) -> Self {
        Node { layer, tag: None }
    }
}

/// Ordered layer graph of an upscaling network. Input is a single-channel
/// normalized range image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<Node>,
    pub upscale_factor: usize,
}

/// Per-sample activation shape `(channels, rows, cols)`.
pub type Shape3 = [usize; 3];

impl NetworkSpec {
    /// Index of the layer producing each tag.
    fn tag_indices(&self) -> Result<HashMap<&str, usize>> {
        let mut tags = HashMap::new();
        for (i, node) in self.layers.iter().enumerate() {
            if let Some(tag) = &node.tag {
                if tags.insert(tag.as_str(), i).is_some() {
                    return Err(Error::Config(format!("duplicate skip tag {tag:?}")));
                }
            }
        }
        Ok(tags)
    }

    /// For each layer, the index of its skip source (Concat only).
    fn skip_sources(&self) -> Result<Vec<Option<usize>>> {
        let tags = self.tag_indices()?;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, node)| match &node.layer {
                LayerSpec::Concat { source } => match tags.get(source.as_str()) {
                    Some(&j) if j < i => Ok(Some(j)),
                    Some(_) => Err(Error::Config(format!("skip source {source:?} does not precede layer {i}"))),
                    None => Err(Error::Config(format!("unknown skip source {source:?} at layer {i}"))),
                },
                _ => Ok(None),
            })
            .collect()
    }

    /// Propagates a per-sample input shape through every layer, returning the
    /// output shape of each.
    pub fn shapes(&self, input: Shape3) -> Result<Vec<Shape3>> {
        let skips = self.skip_sources()?;
        let mut out: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for (i, node) in self.layers.iter().enumerate() {
            let [c, h, w] = cur;
            let bad = |expected: String| Error::shape("NetworkSpec::shapes", expected, format!("layer {i} ({}) input {cur:?}", node.layer.name()));
            cur = match &node.layer {
                LayerSpec::Conv { in_ch, out_ch, .. } => {
                    if c != *in_ch {
                        return Err(bad(format!("{in_ch} channels")));
                    }
                    let (oh, ow) = node.layer.geometry().unwrap().conv_out(h, w).ok_or_else(|| bad("kernel that fits".into()))?;
                    [*out_ch, oh, ow]
                }
                LayerSpec::TransposedConv { in_ch, out_ch, .. } => {
                    if c != *in_ch {
                        return Err(bad(format!("{in_ch} channels")));
                    }
                    let (oh, ow) = node.layer.geometry().unwrap().transposed_out(h, w).ok_or_else(|| bad("invertible transposed geometry".into()))?;
                    [*out_ch, oh, ow]
                }
                LayerSpec::BatchNorm { ch, .. } => {
                    if c != *ch {
                        return Err(bad(format!("{ch} channels")));
                    }
                    cur
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } => cur,
                LayerSpec::AvgPool { k } => {
                    if *k == 0 || h % k != 0 || w % k != 0 {
                        return Err(bad(format!("rows/cols divisible by {k}")));
                    }
                    [c, h / k, w / k]
                }
                LayerSpec::Concat { .. } => {
                    let [sc, sh, sw] = out[skips[i].unwrap()];
                    if (sh, sw) != (h, w) {
                        return Err(bad(format!("spatial size {sh}x{sw} of the skip source")));
                    }
                    [c + sc, h, w]
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Structural checks: tags, parameter ranges, and a single-channel
    /// convolution as the final layer.
    pub fn validate(&self) -> Result<()> {
        self.skip_sources()?;
        for (i, node) in self.layers.iter().enumerate() {
            match node.layer {
                LayerSpec::Dropout { rate } => ops::check_dropout_rate(rate)?,
                LayerSpec::BatchNorm { momentum, eps, .. } => {
                    if !(0.0..1.0).contains(&momentum) || eps <= 0.0 {
                        return Err(Error::Config(format!("layer {i}: batch norm momentum in [0,1) and eps > 0 required")));
                    }
                }
                LayerSpec::Conv { kernel, stride, .. } | LayerSpec::TransposedConv { kernel, stride, .. } => {
                    if kernel.contains(&0) || stride.contains(&0) {
                        return Err(Error::Config(format!("layer {i}: kernel and stride must be >= 1")));
                    }
                }
                _ => {}
            }
        }
        match self.layers.last().map(|n| &n.layer) {
            Some(LayerSpec::Conv { out_ch: 1, .. }) => Ok(()),
            _ => Err(Error::Config("the last layer must be a single-filter convolution".into())),
        }
    }

    /// Output shape for a single-channel `rows x cols` input.
    pub fn output_shape(&self, rows: usize, cols: usize) -> Result<Shape3> {
        Ok(*self.shapes([1, rows, cols])?.last().ok_or_else(|| Error::Config("empty network".into()))?)
    }

    /// Dropout rate of the network (the largest over its dropout layers).
    pub fn dropout_rate(&self) -> f32 {
        self.layers
            .iter()
            .filter_map(|n| match n.layer {
                LayerSpec::Dropout { rate } => Some(rate),
                _ => None,
            })
            .fold(0.0, f32::max)
    }

    pub fn with_dropout_rate(&self, rate: f32) -> Self {
        let mut spec = self.clone();
        for node in &mut spec.layers {
            if let LayerSpec::Dropout { rate: r } = &mut node.layer {
                *r = rate;
            }
        }
        spec
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|n| match n.layer {
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } | LayerSpec::TransposedConv { in_ch, out_ch, kernel, .. } => {
                    in_ch * out_ch * kernel[0] * kernel[1] + out_ch
                }
                LayerSpec::BatchNorm { ch, .. } => 2 * ch,
                _ => 0,
            })
            .sum()
    }
}

/// Hyperparameters of [`build_srnet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrNetConfig {
    pub factor: usize,
    pub base_filters: usize,
    pub dropout_rate: f32,
    pub bn_momentum: f32,
}

impl Default for SrNetConfig {
    fn default() -> Self {
        SrNetConfig {
            factor: 4,
            base_filters: 8,
            dropout_rate: 0.25,
            bn_momentum: 0.9,
        }
    }
}

const BN_EPS: f32 = 1e-3;
const ENCODER_LEVELS: usize = 4;

/// Encoder-decoder upscaler: `log2(factor)` vertical transposed convolutions
/// bring the input to full height, then a four-level encoder (3x3 conv blocks,
/// average pooling, filters doubling from `base_filters`) and a mirrored
/// decoder with transposed convolutions and concatenated skips. Dropout sits
/// before each encoder block and after each pooling, bottleneck and skip
/// join. The output is one linear 3x3 filter.
pub fn build_srnet(cfg: &SrNetConfig) -> Result<NetworkSpec> {
    let stages = match cfg.factor {
        2 => 1,
        4 => 2,
        8 => 3,
        f => return Err(Error::Config(format!("upscale factor must be 2, 4 or 8, got {f}"))),
    };
    if cfg.base_filters == 0 {
        return Err(Error::Config("base_filters must be positive".into()));
    }
    ops::check_dropout_rate(cfg.dropout_rate)?;
    let f = cfg.base_filters;
    let mut layers: Vec<Node> = Vec::new();
    let bn = |ch| LayerSpec::BatchNorm { ch, momentum: cfg.bn_momentum, eps: BN_EPS };
    let dropout = || Node::from(LayerSpec::Dropout { rate: cfg.dropout_rate });
    let conv3 = |in_ch, out_ch| LayerSpec::Conv { in_ch, out_ch, kernel: [3, 3], stride: [1, 1], pad: [1, 1] };
    let block = |layers: &mut Vec<Node>, in_ch: usize, out_ch: usize, tag: Option<String>| {
        layers.push(conv3(in_ch, out_ch).into());
        layers.push(bn(out_ch).into());
        layers.push(LayerSpec::Relu.into());
        layers.push(conv3(out_ch, out_ch).into());
        layers.push(bn(out_ch).into());
        layers.push(Node { layer: LayerSpec::Relu, tag });
    };

    let mut ch = 1;
    for _ in 0..stages {
        layers.push(
            LayerSpec::TransposedConv { in_ch: ch, out_ch: f, kernel: [4, 3], stride: [2, 1], pad: [1, 1] }.into(),
        );
        layers.push(bn(f).into());
        layers.push(LayerSpec::Relu.into());
        ch = f;
    }
    layers.push(dropout());
    for level in 0..ENCODER_LEVELS {
        let filters = f << level;
        if level > 0 {
            layers.push(LayerSpec::AvgPool { k: 2 }.into());
            layers.push(dropout());
        }
        let tag = (level + 1 < ENCODER_LEVELS).then(|| format!("enc{level}"));
        block(&mut layers, ch, filters, tag);
        ch = filters;
    }
    layers.push(dropout());
    for level in (0..ENCODER_LEVELS - 1).rev() {
        let filters = f << level;
        layers.push(
            LayerSpec::TransposedConv { in_ch: ch, out_ch: filters, kernel: [4, 4], stride: [2, 2], pad: [1, 1] }.into(),
        );
        layers.push(bn(filters).into());
        layers.push(LayerSpec::Relu.into());
        layers.push(LayerSpec::Concat { source: format!("enc{level}") }.into());
        layers.push(dropout());
        block(&mut layers, 2 * filters, filters, None);
        ch = filters;
    }
    layers.push(conv3(ch, 1).into());
    let spec = NetworkSpec { layers, upscale_factor: cfg.factor };
    spec.validate()?;
    Ok(spec)
}

/// Learned state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    None,
    Conv { weight: Vec<T>, bias: Vec<T> },
    BatchNorm { gamma: Vec<T>, beta: Vec<T>, running_mean: Vec<T>, running_var: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    /// He-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, node)| match node.layer {
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    let fan_in = in_ch * kernel[0] * kernel[1];
                    he_uniform(in_ch * out_ch * kernel[0] * kernel[1], out_ch, fan_in as f64, seed, i)
                }
                LayerSpec::TransposedConv { in_ch, out_ch, kernel, stride, .. } => {
                    // Each output pixel receives about k/s taps per axis.
                    let fan_in = in_ch as f64 * (kernel[0] * kernel[1]) as f64 / (stride[0] * stride[1]) as f64;
                    he_uniform(in_ch * out_ch * kernel[0] * kernel[1], out_ch, fan_in, seed, i)
                }
                LayerSpec::BatchNorm { ch, .. } => LayerParams::BatchNorm {
                    gamma: vec![T::one(); ch],
                    beta: vec![T::zero(); ch],
                    running_mean: vec![T::zero(); ch],
                    running_var: vec![T::one(); ch],
                },
                _ => LayerParams::None,
            })
            .collect();
        NetworkParams { layers }
    }

    /// Trainable tensors in a fixed order: conv weight then bias, batch-norm
    /// scale then shift.
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Conv { weight, bias } => {
                    out.push(weight.as_slice());
                    out.push(bias.as_slice());
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::Conv { weight, bias } => {
                    out.push(weight.as_mut_slice());
                    out.push(bias.as_mut_slice());
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_mut_slice());
                    out.push(beta.as_mut_slice());
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Every stored tensor in layer order (conv: weight, bias; batch norm:
    /// gamma, beta, running mean, running var).
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Conv { weight, bias } => out.extend([weight.as_slice(), bias.as_slice()]),
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.extend([gamma.as_slice(), beta.as_slice(), running_mean.as_slice(), running_var.as_slice()])
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerParams::Conv { weight, bias } => out.extend([weight, bias]),
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.extend([gamma, beta, running_mean, running_var])
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from(*x).unwrap()).collect::<Vec<U>>();
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::None => LayerParams::None,
                    LayerParams::Conv { weight, bias } => LayerParams::Conv { weight: c(weight), bias: c(bias) },
                    LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => LayerParams::BatchNorm {
                        gamma: c(gamma),
                        beta: c(beta),
                        running_mean: c(running_mean),
                        running_var: c(running_var),
                    },
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn he_uniform<T: Scalar>(n: usize, out_ch: usize, fan_in: f64, seed: u64, layer: usize) -> LayerParams<T> {
    let limit = (6.0 / fan_in.max(1.0)).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let mut r = rng::stream(seed, rng::stream_id([0x1a17, layer as u16, 0, 0]));
    LayerParams::Conv {
        weight: (0..n).map(|_| T::of(dist.sample(&mut r))).collect(),
        bias: vec![T::zero(); out_ch],
    }
}

/// How batch norm and dropout behave in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Running statistics, dropout active (Monte-Carlo sampling).
    McDropout,
}

enum Cache<T> {
    Input(Tensor4<T>),
    BatchNorm(BatchNormCache<T>),
    Output(Tensor4<T>),
    Pool([usize; 4]),
    Dropout(Option<Vec<T>>),
    Concat(usize),
    None,
}

/// Activations recorded by a training forward pass.
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Hash of which ReLU units are active. Two passes with equal patterns
    /// lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for c in &self.caches {
            if let Cache::Output(y) = c {
                for v in y.as_slice() {
                    (*v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Batch mean and variance of each batch-norm layer, by layer index.
    pub fn batch_stats(&self) -> impl Iterator<Item = (usize, &[T], &[T])> {
        self.caches.iter().enumerate().filter_map(|(i, c)| match c {
            Cache::BatchNorm(bn) => Some((i, bn.mean.as_slice(), bn.var.as_slice())),
            _ => None,
        })
    }
}

/// A spec with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub params: NetworkParams<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: NetworkSpec, params: NetworkParams<T>) -> Result<Self> {
        spec.validate()?;
        if params.layers.len() != spec.layers.len() {
            return Err(Error::shape("Network::new", format!("{} layer params", spec.layers.len()), params.layers.len()));
        }
        for (i, (node, p)) in spec.layers.iter().zip(&params.layers).enumerate() {
            let ok = match (&node.layer, p) {
                (
                    LayerSpec::Conv { in_ch, out_ch, kernel, .. } | LayerSpec::TransposedConv { in_ch, out_ch, kernel, .. },
                    LayerParams::Conv { weight, bias },
                ) => weight.len() == in_ch * out_ch * kernel[0] * kernel[1] && bias.len() == *out_ch,
                (LayerSpec::BatchNorm { ch, .. }, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    [gamma, beta, running_mean, running_var].iter().all(|v| v.len() == *ch)
                }
                (LayerSpec::BatchNorm { .. } | LayerSpec::Conv { .. } | LayerSpec::TransposedConv { .. }, _) => false,
                (_, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::shape("Network::new", format!("parameters matching layer {i} ({})", node.layer.name()), "mismatched tensors"));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = NetworkParams::init(&spec, seed);
        Network::new(spec, params)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { spec: self.spec.clone(), params: self.params.cast() }
    }

    /// Forward pass without recording activations.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor4<T>, mode: Mode, rng: &mut R) -> Result<Tensor4<T>> {
        Ok(self.run(x, mode, rng, false)?.0)
    }

    /// Forward pass recording what [`Network::backward`] needs.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Tensor4<T>, mode: Mode, rng: &mut R) -> Result<(Tensor4<T>, Tape<T>)> {
        let (y, caches) = self.run(x, mode, rng, true)?;
        Ok((y, Tape { caches }))
    }

    fn run<R: Rng + ?Sized>(&self, x: &Tensor4<T>, mode: Mode, rng: &mut R, record: bool) -> Result<(Tensor4<T>, Vec<Cache<T>>)> {
        if x.channels() != 1 {
            return Err(Error::shape("Network::forward", "1 input channel", x.channels()));
        }
        let skips = self.spec.skip_sources()?;
        let mut saved: HashMap<usize, Tensor4<T>> = HashMap::new();
        let mut caches = Vec::with_capacity(if record { self.spec.layers.len() } else { 0 });
        let mut cur = x.clone();
        for (i, (node, p)) in self.spec.layers.iter().zip(&self.params.layers).enumerate() {
            let (next, cache) = match (&node.layer, p) {
                (LayerSpec::Conv { out_ch, .. }, LayerParams::Conv { weight, bias }) => {
                    let y = ops::conv2d_forward(&cur, weight, bias, *out_ch, &node.layer.geometry().unwrap())?;
                    (y, Cache::Input(cur))
                }
                (LayerSpec::TransposedConv { out_ch, .. }, LayerParams::Conv { weight, bias }) => {
                    let y = ops::tconv2d_forward(&cur, weight, bias, *out_ch, &node.layer.geometry().unwrap())?;
                    (y, Cache::Input(cur))
                }
                (LayerSpec::BatchNorm { eps, .. }, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    if mode == Mode::Train {
                        let (y, c) = ops::batchnorm_train(&cur, gamma, beta, T::of(*eps as f64))?;
                        (y, Cache::BatchNorm(c))
                    } else {
                        let y = ops::batchnorm_eval(&cur, gamma, beta, running_mean, running_var, T::of(*eps as f64))?;
                        (y, Cache::None)
                    }
                }
                (LayerSpec::Relu, _) => {
                    let y = ops::relu_forward(&cur);
                    let c = if record { Cache::Output(y.clone()) } else { Cache::None };
                    (y, c)
                }
                (LayerSpec::AvgPool { k }, _) => (ops::avgpool_forward(&cur, *k)?, Cache::Pool(cur.shape())),
                (LayerSpec::Dropout { rate }, _) => {
                    let (y, mask) = ops::dropout_forward(&cur, *rate, mode != Mode::Eval, rng)?;
                    (y, Cache::Dropout(mask))
                }
                (LayerSpec::Concat { .. }, _) => {
                    let src = &saved[&skips[i].unwrap()];
                    (ops::concat_forward(&cur, src)?, Cache::Concat(cur.channels()))
                }
                _ => unreachable!("validated in Network::new"),
            };
            if node.tag.is_some() {
                saved.insert(i, next.clone());
            }
            if record {
                caches.push(cache);
            }
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Gradients of every trainable tensor (in [`NetworkParams::trainable`]
    /// order) and of the input, given the gradient of the output.
    pub fn backward(&self, tape: &Tape<T>, dy: &Tensor4<T>) -> Result<(Vec<Vec<T>>, Tensor4<T>)> {
        let skips = self.spec.skip_sources()?;
        let n = self.spec.layers.len();
        if tape.caches.len() != n {
            return Err(Error::Config("tape does not belong to this network".into()));
        }
        let mut grads: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; n];
        let mut pending: HashMap<usize, Tensor4<T>> = HashMap::new();
        let mut cur = dy.clone();
        for i in (0..n).rev() {
            if let Some(extra) = pending.remove(&i) {
                for (a, &b) in cur.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                    *a += b;
                }
            }
            let node = &self.spec.layers[i];
            let p = &self.params.layers[i];
            cur = match (&node.layer, p, &tape.caches[i]) {
                (LayerSpec::Conv { .. }, LayerParams::Conv { weight, .. }, Cache::Input(x)) => {
                    let (dx, dw, db) = ops::conv2d_backward(x, weight, &cur, &node.layer.geometry().unwrap())?;
                    grads[i] = Some((dw, db));
                    dx
                }
                (LayerSpec::TransposedConv { .. }, LayerParams::Conv { weight, .. }, Cache::Input(x)) => {
                    let (dx, dw, db) = ops::tconv2d_backward(x, weight, &cur, &node.layer.geometry().unwrap())?;
                    grads[i] = Some((dw, db));
                    dx
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm { gamma, .. }, Cache::BatchNorm(c)) => {
                    let (dx, dg, dbeta) = ops::batchnorm_backward(&cur, c, gamma);
                    grads[i] = Some((dg, dbeta));
                    dx
                }
                (LayerSpec::Relu, _, Cache::Output(y)) => ops::relu_backward(&cur, y),
                (LayerSpec::AvgPool { k }, _, Cache::Pool(shape)) => ops::avgpool_backward(&cur, *shape, *k),
                (LayerSpec::Dropout { .. }, _, Cache::Dropout(mask)) => ops::dropout_backward(&cur, mask.as_deref()),
                (LayerSpec::Concat { .. }, _, Cache::Concat(split)) => {
                    let (a, b) = ops::concat_backward(&cur, *split);
                    let src = skips[i].unwrap();
                    match pending.get_mut(&src) {
                        Some(acc) => {
                            for (x, &y) in acc.as_mut_slice().iter_mut().zip(b.as_slice()) {
                                *x += y;
                            }
                        }
                        None => {
                            pending.insert(src, b);
                        }
                    }
                    a
                }
                (LayerSpec::BatchNorm { .. }, _, _) => {
                    return Err(Error::Config("backward requires a training-mode forward pass".into()));
                }
                _ => return Err(Error::Config(format!("tape entry {i} does not match the layer"))),
            };
        }
        let flat = grads.into_iter().flatten().flat_map(|(a, b)| [a, b]).collect();
        Ok((flat, cur))
    }

    /// Folds the batch statistics recorded in `tape` into the running
    /// averages: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        for (i, mean, var) in tape.batch_stats() {
            let momentum = match self.spec.layers[i].layer {
                LayerSpec::BatchNorm { momentum, .. } => T::of(momentum as f64),
                _ => continue,
            };
            if let LayerParams::BatchNorm { running_mean, running_var, .. } = &mut self.params.layers[i] {
                for (r, &m) in running_mean.iter_mut().zip(mean) {
                    *r = momentum * *r + (T::one() - momentum) * m;
                }
                for (r, &v) in running_var.iter_mut().zip(var) {
                    *r = momentum * *r + (T::one() - momentum) * v;
                }
            }
        }
    }
}
