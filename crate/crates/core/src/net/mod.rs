//! Encoder-decoder segmentation network with a flat or grouped head,
//! its optimizer, checkpoints and training loop.
//!
//! Layout per level: two 3x3 conv + instance norm + ReLU blocks in the
//! encoder, 2x2 max pooling between levels, and in the decoder a nearest
//! upsample followed by a conv, concatenation with the encoder skip, then
//! two more conv blocks. A 1x1 conv with bias produces the logits.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DepthMap, Sample};
use crate::head::{ChannelMap, LogitsMap};
use crate::schema::GroupSchema;

pub use layers::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input is {height}x{width}, expected {channels} channel(s) with sides divisible by {divisor}")]
    Dimension {
        height: usize,
        width: usize,
        channels: usize,
        divisor: usize,
    },
    #[error("gradient has shape {found:?}, expected {expected:?}")]
    GradShape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("forward cache does not belong to the current model state")]
    StaleCache,
    #[error("parameter block {block} has {found} values, expected {expected}")]
    BlockSize {
        block: String,
        expected: usize,
        found: usize,
    },
}

/// Which head the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Flat N-way softmax over categories.
    Dss,
    /// Visible-group distribution plus one distribution per group.
    Gss,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dss => "dss",
            Mode::Gss => "gss",
        }
    }

    pub fn output_channels(self, schema: &GroupSchema) -> usize {
        match self {
            Mode::Dss => schema.num_categories(),
            Mode::Gss => schema.activation_count(),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dss" => Ok(Mode::Dss),
            "gss" => Ok(Mode::Gss),
            _ => Err(format!("unknown mode `{s}` (expected gss or dss)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub base_width: usize,
    /// Each level halves the resolution.
    pub levels: usize,
    pub norm_eps: f64,
    pub mode: Mode,
    pub output_channels: usize,
    /// Squash logits through a sigmoid before the softmax heads.
    #[serde(default)]
    pub output_sigmoid: bool,
    /// Instance-normalize the first conv block too. Off by default: the
    /// first block then has a bias and sees absolute (standardized) depth.
    #[serde(default)]
    pub normalize_stem: bool,
    /// Depth is fed as `(d - input_mean) / input_std`.
    #[serde(default)]
    pub input_mean: f64,
    #[serde(default = "one")]
    pub input_std: f64,
}

/// Threshold range of the stem initialization, in standard deviations.
const STEM_LOW: f64 = -3.0;
const STEM_HIGH: f64 = 1.5;

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    /// Small defaults for CPU training.
    pub fn for_schema(mode: Mode, schema: &GroupSchema) -> Self {
        Self {
            input_channels: 1,
            base_width: 16,
            levels: 3,
            norm_eps: 1e-5,
            mode,
            output_channels: mode.output_channels(schema),
            output_sigmoid: false,
            normalize_stem: false,
            input_mean: 0.0,
            input_std: 1.0,
        }
    }

    /// Sets the input standardization from the depth of `samples`.
    pub fn with_input_stats(mut self, samples: &[Sample]) -> Self {
        let values: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.depth.as_slice().iter().map(|&d| d as f64))
            .collect();
        if values.is_empty() {
            return self;
        }
        let n = values.len() as f64;
        let mean = crate::head::pairwise_sum(&values) / n;
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let std = (crate::head::pairwise_sum(&sq) / n).sqrt();
        self.input_mean = mean;
        self.input_std = if std > 0.0 { std } else { 1.0 };
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Config(m.into()));
        if self.input_channels == 0 || self.base_width == 0 || self.output_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.levels > 8 {
            return bad("at most 8 levels");
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad("norm_eps must be positive");
        }
        if !self.input_mean.is_finite() || !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return bad("input_mean must be finite and input_std positive");
        }
        Ok(())
    }

    pub fn check_schema(&self, schema: &GroupSchema) -> Result<(), NetError> {
        let expected = self.mode.output_channels(schema);
        if self.output_channels != expected {
            return Err(NetError::Config(format!(
                "{} head needs {expected} channels for this schema, config has {}",
                self.mode.as_str(),
                self.output_channels
            )));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON.
    pub fn fingerprint(&self) -> u64 {
        let d = Sha256::digest(self.to_json().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    fn ops(&self) -> (Vec<Op>, Vec<BlockSpec>) {
        let mut b = Builder::default();
        let w = self.base_width;
        let mut ch = self.input_channels;
        for level in 0..self.levels {
            let out = w << level;
            if level == 0 && !self.normalize_stem {
                b.conv("enc0.0", ch, out, 3, Init::Uniform, true);
                b.ops.push(Op::Relu);
                // the un-normalized stem also feeds the head
                b.ops.push(Op::PushSkip);
            } else {
                b.conv_block(&format!("enc{level}.0"), ch, out);
            }
            b.conv_block(&format!("enc{level}.1"), out, out);
            b.ops.push(Op::PushSkip);
            b.ops.push(Op::Pool);
            ch = out;
        }
        let out = w << self.levels;
        b.conv_block("mid.0", ch, out);
        b.conv_block("mid.1", out, out);
        ch = out;
        for level in (0..self.levels).rev() {
            let out = w << level;
            b.ops.push(Op::Upsample);
            b.conv_block(&format!("dec{level}.up"), ch, out);
            b.ops.push(Op::ConcatSkip { first: out });
            b.conv_block(&format!("dec{level}.0"), 2 * out, out);
            b.conv_block(&format!("dec{level}.1"), out, out);
            ch = out;
        }
        if !self.normalize_stem {
            b.ops.push(Op::ConcatSkip { first: ch });
            ch += w;
        }
        b.conv("head", ch, self.output_channels, 1, Init::Zero, true);
        if self.output_sigmoid {
            b.ops.push(Op::Sigmoid);
        }
        (b.ops, b.blocks)
    }

    /// Name and length of every parameter block, in storage order.
    pub fn block_layout(&self) -> Vec<(String, usize)> {
        self.ops().1.into_iter().map(|s| {
            let n = s.len();
            (s.name, n)
        }).collect()
    }

    /// Parameter count, a pure function of the config.
    pub fn parameter_count(&self) -> usize {
        self.ops().1.iter().map(BlockSpec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockSpec {
    name: String,
    shape: Vec<usize>,
    /// Fan-in for the uniform initializer; `None` means zero init.
    fan_in: Option<usize>,
}

impl BlockSpec {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Conv {
        weight: usize,
        bias: Option<usize>,
        cin: usize,
        cout: usize,
        kernel: usize,
    },
    Norm,
    Relu,
    Pool,
    Upsample,
    PushSkip,
    ConcatSkip {
        first: usize,
    },
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Uniform,
    Zero,
}

#[derive(Default)]
struct Builder {
    ops: Vec<Op>,
    blocks: Vec<BlockSpec>,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, init: Init, with_bias: bool) {
        let weight = self.blocks.len();
        self.blocks.push(BlockSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, kernel, kernel],
            fan_in: (init == Init::Uniform).then_some(cin * kernel * kernel),
        });
        let bias = with_bias.then(|| {
            self.blocks.push(BlockSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                fan_in: None,
            });
            weight + 1
        });
        self.ops.push(Op::Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
        });
    }

    /// Conv without bias (the norm removes it), norm, ReLU.
    fn conv_block(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(name, cin, cout, 3, Init::Uniform, false);
        self.ops.push(Op::Norm);
        self.ops.push(Op::Relu);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct Model<T> {
    config: ModelConfig,
    ops: Vec<Op>,
    pub blocks: Vec<ParamBlock<T>>,
    instance: u64,
    version: u64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            ops: self.ops.clone(),
            blocks: self.blocks.clone(),
            instance: NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

/// Parameter gradients, one vector per block.
pub type Grads<T> = Vec<Vec<T>>;

impl<T: Scalar> Model<T> {
    /// Fan-in scaled uniform init (Kaiming bound `sqrt(6 / fan_in)`) for
    /// trunk kernels; zeros for the head and biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let (ops, specs) = config.ops();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = specs
            .into_iter()
            .map(|s| {
                let n = s.len();
                let data = match s.fan_in {
                    Some(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
                    }
                    None => vec![T::ZERO; n],
                };
                ParamBlock {
                    name: s.name,
                    shape: s.shape,
                    data,
                }
            })
            .collect::<Vec<_>>();
        let mut model = Self::assemble(config, ops, blocks);
        model.init_stem_thresholds();
        Ok(model)
    }

    /// Spreads the un-normalized stem's activation thresholds over the
    /// standardized depth range: channel `k` starts as `relu(s_k (x - t_k))`
    /// with `s_k` its kernel sum.
    fn init_stem_thresholds(&mut self) {
        if self.config.normalize_stem {
            return;
        }
        let Some(wi) = self.blocks.iter().position(|b| b.name == "enc0.0.weight") else {
            return;
        };
        let cout = self.blocks[wi].shape[0];
        let per = self.blocks[wi].data.len() / cout;
        let sums: Vec<f64> = self.blocks[wi]
            .data
            .chunks(per)
            .map(|c| c.iter().map(|v| v.to_f64()).sum())
            .collect();
        let bias = &mut self.blocks[wi + 1].data;
        for (k, s) in sums.iter().enumerate() {
            let t = STEM_LOW + (STEM_HIGH - STEM_LOW) * (k as f64 + 0.5) / cout as f64;
            bias[k] = T::from_f64(-s * t);
        }
    }

    fn assemble(config: ModelConfig, ops: Vec<Op>, blocks: Vec<ParamBlock<T>>) -> Self {
        Self {
            config,
            ops,
            blocks,
            instance: NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    /// Rebuilds a model from stored block values (checked against the
    /// config's layout).
    pub fn from_blocks(config: ModelConfig, values: Vec<Vec<T>>) -> Result<Self, NetError> {
        config.validate()?;
        let (ops, specs) = config.ops();
        if values.len() != specs.len() {
            return Err(NetError::Config(format!(
                "expected {} parameter blocks, found {}",
                specs.len(),
                values.len()
            )));
        }
        let mut blocks = Vec::with_capacity(specs.len());
        for (s, data) in specs.into_iter().zip(values) {
            if data.len() != s.len() {
                return Err(NetError::BlockSize {
                    expected: s.len(),
                    block: s.name,
                    found: data.len(),
                });
            }
            blocks.push(ParamBlock {
                name: s.name,
                shape: s.shape,
                data,
            });
        }
        Ok(Self::assemble(config, ops, blocks))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    /// Parameters of every block except the final 1x1 head.
    pub fn trunk_parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !b.name.starts_with("head."))
            .map(|b| b.data.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| ParamBlock {
                name: b.name.clone(),
                shape: b.shape.clone(),
                data: b.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            })
            .collect();
        Model::assemble(self.config.clone(), self.ops.clone(), blocks)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.blocks.iter().map(|b| vec![T::ZERO; b.data.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// Invalidates outstanding forward caches; call after changing weights.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn input_from_depth(&self, depth: &DepthMap) -> Result<Tensor<T>, NetError> {
        let t = Tensor {
            channels: 1,
            height: depth.height(),
            width: depth.width(),
            data: depth
                .as_slice()
                .iter()
                .map(|&d| T::from_f64((d as f64 - self.config.input_mean) / self.config.input_std))
                .collect(),
        };
        self.check_input(&t)?;
        Ok(t)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NetError> {
        let d = self.config.divisor();
        if x.channels != self.config.input_channels
            || x.height == 0
            || x.width == 0
            || x.height % d != 0
            || x.width % d != 0
        {
            return Err(NetError::Dimension {
                height: x.height,
                width: x.width,
                channels: self.config.input_channels,
                divisor: d,
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>), NetError> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut saved = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let entry = match *op {
                Op::Conv {
                    weight, bias, cout, kernel, ..
                } => {
                    let b = bias.map(|i| self.blocks[i].data.as_slice());
                    let (y, col) = layers::conv_forward(&x, &self.blocks[weight].data, b, cout, kernel);
                    let shape = (x.channels, x.height, x.width);
                    x = y;
                    Saved::Conv { col, shape }
                }
                Op::Norm => {
                    let (y, inv) = layers::instance_norm_forward(&x, self.config.norm_eps);
                    x = y;
                    Saved::Norm { out: x.clone(), inv }
                }
                Op::Relu => {
                    layers::relu_forward(&mut x);
                    Saved::Output(x.clone())
                }
                Op::Sigmoid => {
                    layers::sigmoid_forward(&mut x);
                    Saved::Output(x.clone())
                }
                Op::Pool => {
                    let shape = (x.channels, x.height, x.width);
                    let (y, arg) = layers::maxpool_forward(&x);
                    x = y;
                    Saved::Pool { arg, shape }
                }
                Op::Upsample => {
                    x = layers::upsample_forward(&x);
                    Saved::None
                }
                Op::PushSkip => {
                    skips.push(x.clone());
                    Saved::None
                }
                Op::ConcatSkip { .. } => {
                    let s = skips.pop().expect("skip pushed by encoder");
                    x = layers::concat(&x, &s);
                    Saved::None
                }
            };
            saved.push(entry);
        }
        let out_shape = (x.channels, x.height, x.width);
        Ok((
            x,
            Cache {
                instance: self.instance,
                version: self.version,
                saved,
                out_shape,
            },
        ))
    }

    /// Reverse pass; returns gradients for every parameter block.
    pub fn backward(&self, cache: Cache<T>, grad_out: &Tensor<T>) -> Result<Grads<T>, NetError> {
        if cache.instance != self.instance || cache.version != self.version || cache.saved.len() != self.ops.len() {
            return Err(NetError::StaleCache);
        }
        let Cache { saved, out_shape, .. } = cache;
        let found = (grad_out.channels, grad_out.height, grad_out.width);
        if out_shape != found {
            return Err(NetError::GradShape {
                expected: out_shape,
                found,
            });
        }
        let mut grads = self.zero_grads();
        let mut g = grad_out.clone();
        let mut skip_grads: Vec<Tensor<T>> = Vec::new();
        for (op, entry) in self.ops.iter().zip(saved).rev() {
            match (*op, entry) {
                (
                    Op::Conv {
                        weight, bias, cin, kernel, ..
                    },
                    Saved::Conv { col, shape },
                ) => {
                    let (gw, gb) = split_two(&mut grads, weight, bias);
                    let mut gx = layers::conv_backward(&g, &col, &self.blocks[weight].data, cin, kernel, gw, gb);
                    debug_assert_eq!((gx.channels, gx.height, gx.width), shape);
                    std::mem::swap(&mut g, &mut gx);
                }
                (Op::Norm, Saved::Norm { out, inv }) => {
                    g = layers::instance_norm_backward(&g, &out, &inv);
                }
                (Op::Relu, Saved::Output(y)) => layers::relu_backward(&mut g, &y),
                (Op::Sigmoid, Saved::Output(y)) => layers::sigmoid_backward(&mut g, &y),
                (Op::Pool, Saved::Pool { arg, shape }) => {
                    g = layers::maxpool_backward(&g, &arg, shape.0, shape.1, shape.2);
                }
                (Op::Upsample, Saved::None) => g = layers::upsample_backward(&g),
                (Op::ConcatSkip { first }, Saved::None) => {
                    let (a, b) = layers::split(g, first);
                    skip_grads.push(b);
                    g = a;
                }
                (Op::PushSkip, Saved::None) => {
                    let s = skip_grads.pop().expect("skip gradient from decoder");
                    for (v, &sv) in g.data.iter_mut().zip(&s.data) {
                        *v += sv;
                    }
                }
                _ => return Err(NetError::StaleCache),
            }
        }
        Ok(grads)
    }

    /// Forward pass on a depth map, returned in head layout.
    pub fn logits(&self, depth: &DepthMap) -> Result<LogitsMap, NetError> {
        let x = self.input_from_depth(depth)?;
        let (y, _) = self.forward(&x)?;
        Ok(tensor_to_map(&y))
    }
}

fn split_two<T>(grads: &mut [Vec<T>], weight: usize, bias: Option<usize>) -> (&mut [T], Option<&mut [T]>) {
    match bias {
        Some(b) => {
            debug_assert_eq!(b, weight + 1);
            let (lo, hi) = grads.split_at_mut(b);
            (&mut lo[weight], Some(&mut hi[0]))
        }
        None => (&mut grads[weight], None),
    }
}

#[derive(Debug)]
enum Saved<T> {
    Conv { col: Vec<T>, shape: (usize, usize, usize) },
    Norm { out: Tensor<T>, inv: Vec<T> },
    Output(Tensor<T>),
    Pool { arg: Vec<u32>, shape: (usize, usize, usize) },
    None,
}

/// Activations kept by [`Model::forward`] for the matching backward call.
#[derive(Debug)]
pub struct Cache<T> {
    instance: u64,
    version: u64,
    saved: Vec<Saved<T>>,
    out_shape: (usize, usize, usize),
}

/// CHW tensor to pixel-major `f64` map.
pub fn tensor_to_map<T: Scalar>(t: &Tensor<T>) -> ChannelMap {
    let plane = t.plane();
    let mut m = ChannelMap::zeros(t.height, t.width, t.channels);
    for c in 0..t.channels {
        for (k, &v) in t.channel(c).iter().enumerate() {
            m.data[k * t.channels + c] = v.to_f64();
        }
    }
    debug_assert_eq!(m.data.len(), plane * t.channels);
    m
}

/// Pixel-major map back to a CHW tensor.
pub fn map_to_tensor<T: Scalar>(m: &ChannelMap) -> Tensor<T> {
    let plane = m.height * m.width;
    let mut t = Tensor::zeros(m.channels, m.height, m.width);
    for k in 0..plane {
        for (c, &v) in m.pixel(k).iter().enumerate() {
            t.data[c * plane + k] = T::from_f64(v);
        }
    }
    t
}

#[cfg(test)]
mod tests;
