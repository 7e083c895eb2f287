//! Shallow and deep orthogonal capsule networks.
//!
//! Pipeline: conv backbone → dropout → primary capsules (depthwise conv,
//! reshape, squash) → similarity pruning → ConvCaps blocks with shortcuts →
//! flat class capsules → lengths.
//!
//! Capsules flow between layers as `[B, H, W, n, d]` so that routing can
//! treat every spatial site as an independent `[n, d]` problem. Pruned
//! capsule types keep their slot and are held at zero; keys of pruned types
//! are masked out of every routing step and the mask is re-applied after each
//! ConvCaps layer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::capsule::{prune_mask, CapsuleTensor, PruneEma, PruneMask};
use crate::entmax::EntmaxConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::routing::{votes, AttentionRoutingLayer, Normalizer, Projection, SimplifiedRoutingLayer};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Shallow,
    Deep,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Shallow => "shallow",
            Variant::Deep => "deep",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" | "s" => Ok(Variant::Shallow),
            "deep" | "d" => Ok(Variant::Deep),
            _ => Err(Error::Config(format!("unknown variant '{s}' (shallow|deep)"))),
        }
    }
}

/// Backbone convolution, written `channels:kernel:stride:padding`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { channels, kernel, stride, padding }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.channels, self.kernel, self.stride, self.padding)
    }
}

impl FromStr for ConvSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad conv spec '{s}'")))?;
        match parts[..] {
            [c, k, st, p] => Ok(Self::new(c, k, st, p)),
            [c, k, st] => Ok(Self::new(c, k, st, 0)),
            _ => Err(Error::Config(format!("conv spec '{s}' must be channels:kernel:stride[:padding]"))),
        }
    }
}

fn parse_list<V: FromStr>(s: &str) -> std::result::Result<Vec<V>, V::Err> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(V::from_str).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub n_caps: usize,
    pub d: usize,
    pub theta: f64,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub heads: usize,
    pub alpha: f64,
    /// Use softmax instead of entmax in every routing step.
    pub softmax: bool,
    pub backbone: Vec<ConvSpec>,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub primary_padding: usize,
    pub dropout: f64,
    /// `false` substitutes unconstrained dense matrices for every Householder map.
    pub orthogonal: bool,
    /// Blocks whose first layer has stride 2.
    pub downsample: Vec<usize>,
}

impl ModelConfig {
    /// Shallow model for 1×28×28 digits: no capsule blocks.
    pub fn shallow_mnist() -> Self {
        Self {
            variant: Variant::Shallow,
            input: (1, 28, 28),
            classes: 10,
            n_caps: 16,
            d: 16,
            theta: 0.7,
            blocks: 0,
            layers_per_block: 0,
            heads: 4,
            alpha: 1.5,
            softmax: false,
            backbone: vec![
                ConvSpec::new(32, 3, 1, 0),
                ConvSpec::new(32, 3, 1, 0),
                ConvSpec::new(64, 3, 2, 0),
                ConvSpec::new(64, 3, 1, 0),
            ],
            primary_kernel: 9,
            primary_stride: 1,
            primary_padding: 0,
            dropout: 0.25,
            orthogonal: true,
            downsample: Vec::new(),
        }
    }

    /// Shallow model for colour images: one block of two ConvCaps layers.
    pub fn shallow_cifar10() -> Self {
        Self {
            input: (3, 32, 32),
            blocks: 1,
            layers_per_block: 2,
            backbone: vec![
                ConvSpec::new(32, 3, 1, 0),
                ConvSpec::new(64, 3, 1, 0),
                ConvSpec::new(64, 3, 2, 0),
                ConvSpec::new(64, 3, 1, 0),
            ],
            primary_kernel: 9,
            primary_stride: 1,
            ..Self::shallow_mnist()
        }
    }

    /// Deep model: seven blocks of three ConvCaps layers with attention routing.
    pub fn deep_cifar10() -> Self {
        Self {
            variant: Variant::Deep,
            input: (3, 32, 32),
            classes: 10,
            blocks: 7,
            layers_per_block: 3,
            backbone: vec![
                ConvSpec::new(32, 3, 1, 1),
                ConvSpec::new(64, 3, 1, 1),
                ConvSpec::new(64, 3, 1, 1),
                ConvSpec::new(128, 3, 1, 1),
            ],
            primary_kernel: 3,
            primary_stride: 2,
            primary_padding: 1,
            downsample: vec![1, 3, 5],
            ..Self::shallow_mnist()
        }
    }

    /// Small shallow model for 1×16×16 synthetic data.
    pub fn shallow_synthetic(classes: usize) -> Self {
        Self {
            input: (1, 16, 16),
            classes,
            backbone: vec![
                ConvSpec::new(16, 3, 1, 0),
                ConvSpec::new(16, 3, 1, 0),
                ConvSpec::new(32, 3, 2, 0),
                ConvSpec::new(32, 3, 1, 0),
            ],
            primary_kernel: 3,
            ..Self::shallow_mnist()
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Shallow => Self::shallow_mnist(),
            Variant::Deep => Self::deep_cifar10(),
        }
    }

    pub fn normalizer(&self) -> Normalizer {
        if self.softmax {
            Normalizer::Softmax
        } else {
            Normalizer::Entmax(EntmaxConfig::with_alpha(self.alpha))
        }
    }

    /// Applies one `key=value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("invalid value '{value}' for {what}"));
        let num = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
        let real = |what: &str| value.parse::<f64>().map_err(|_| bad(what));
        let flag = |what: &str| value.parse::<bool>().map_err(|_| bad(what));
        match key {
            "variant" => self.variant = value.parse()?,
            "input" => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("input"))?;
                let [c, h, w] = dims[..] else { return Err(bad("input (expected CxHxW)")) };
                self.input = (c, h, w);
            }
            "classes" => self.classes = num(key)?,
            "n_caps" => self.n_caps = num(key)?,
            "d" => self.d = num(key)?,
            "theta" => self.theta = real(key)?,
            "blocks" => self.blocks = num(key)?,
            "layers_per_block" => self.layers_per_block = num(key)?,
            "heads" => self.heads = num(key)?,
            "alpha" => self.alpha = real(key)?,
            "softmax" => self.softmax = flag(key)?,
            "backbone" => self.backbone = parse_list(value)?,
            "primary_kernel" => self.primary_kernel = num(key)?,
            "primary_stride" => self.primary_stride = num(key)?,
            "primary_padding" => self.primary_padding = num(key)?,
            "dropout" => self.dropout = real(key)?,
            "orthogonal" => self.orthogonal = flag(key)?,
            "downsample" => self.downsample = parse_list(value).map_err(|_| bad(key))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[String]| v.join(",");
        vec![
            ("variant", self.variant.to_string()),
            ("input", format!("{}x{}x{}", self.input.0, self.input.1, self.input.2)),
            ("classes", self.classes.to_string()),
            ("n_caps", self.n_caps.to_string()),
            ("d", self.d.to_string()),
            ("theta", self.theta.to_string()),
            ("blocks", self.blocks.to_string()),
            ("layers_per_block", self.layers_per_block.to_string()),
            ("heads", self.heads.to_string()),
            ("alpha", self.alpha.to_string()),
            ("softmax", self.softmax.to_string()),
            ("backbone", list(&self.backbone.iter().map(|c| c.to_string()).collect::<Vec<_>>())),
            ("primary_kernel", self.primary_kernel.to_string()),
            ("primary_stride", self.primary_stride.to_string()),
            ("primary_padding", self.primary_padding.to_string()),
            ("dropout", self.dropout.to_string()),
            ("orthogonal", self.orthogonal.to_string()),
            ("downsample", list(&self.downsample.iter().map(|c| c.to_string()).collect::<Vec<_>>())),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::shallow_mnist();
        let mut lines = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            lines.push((k.trim(), v.trim()));
        }
        // the variant decides the defaults the remaining keys override
        if let Some((_, v)) = lines.iter().find(|(k, _)| *k == "variant") {
            cfg = Self::for_variant(v.parse()?);
        }
        for (k, v) in lines {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key '{k}'")));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return err(format!("input dims must be positive, got {c}x{h}x{w}"));
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.n_caps == 0 || self.d == 0 {
            return err("n_caps and d must be positive".into());
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return err(format!("theta must lie in (0, 1], got {}", self.theta));
        }
        if !self.softmax && !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return err(format!("alpha must lie in (1, 2], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.backbone.is_empty() {
            return err("backbone needs at least one convolution".into());
        }
        match self.variant {
            Variant::Shallow => {
                if self.blocks > 1 || self.blocks * self.layers_per_block > 2 {
                    return err(format!(
                        "shallow variant allows one block of at most 2 ConvCaps layers, got {}x{}",
                        self.blocks, self.layers_per_block
                    ));
                }
            }
            Variant::Deep => {
                if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
                    return err(format!("d={} is not divisible by heads={}", self.d, self.heads));
                }
            }
        }
        if self.blocks > 0 && self.layers_per_block == 0 {
            return err("blocks need at least one layer".into());
        }
        if let Some(&b) = self.downsample.iter().find(|&&b| b >= self.blocks) {
            return err(format!("downsample block {b} out of range for {} blocks", self.blocks));
        }
        Ok(())
    }
}

/// Static description of one layer: output shape without the batch axis and
/// parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    /// `[C, H, W]` for convolutions, `[n, d, W, H]` for capsules,
    /// `[classes]` for the length readout.
    pub out_shape: Vec<usize>,
    pub params: usize,
    /// Parameters scale with the number of retained capsule types.
    pub per_type: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    PrimaryCaps,
    Prune,
    ConvCaps,
    Shortcut,
    FlatCaps,
}

/// Fully resolved shape trace of a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<LayerDesc>,
}

impl LayerStack {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn find(&self, name: &str) -> Option<&LayerDesc> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }
}

fn conv_out(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (s > 0 && k > 0 && len + 2 * p >= k).then(|| (len + 2 * p - k) / s + 1)
}

fn block_stride(cfg: &ModelConfig, block: usize) -> usize {
    if cfg.downsample.contains(&block) {
        2
    } else {
        1
    }
}

/// Resolves the shape trace of `cfg`, or names the layer that cannot be built.
pub fn build(cfg: &ModelConfig) -> Result<LayerStack> {
    cfg.validate()?;
    let (mut c, mut h, mut w) = cfg.input;
    let mut layers = Vec::new();
    for (i, spec) in cfg.backbone.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        let (Some(oh), Some(ow)) = (
            conv_out(h, spec.kernel, spec.stride, spec.padding),
            conv_out(w, spec.kernel, spec.stride, spec.padding),
        ) else {
            return Err(Error::Config(format!("{name}: {spec} does not fit a {h}x{w} input")));
        };
        let params = spec.channels * c * spec.kernel * spec.kernel + spec.channels;
        layers.push(LayerDesc { name, kind: LayerKind::Conv, out_shape: vec![spec.channels, oh, ow], params, per_type: false });
        (c, h, w) = (spec.channels, oh, ow);
    }
    let (n, d) = (cfg.n_caps, cfg.d);
    if (n * d) % c != 0 {
        return Err(Error::Config(format!("primary: n_caps*d = {} is not a multiple of {c} backbone channels", n * d)));
    }
    let (k, s, p) = (cfg.primary_kernel, cfg.primary_stride, cfg.primary_padding);
    let (Some(oh), Some(ow)) = (conv_out(h, k, s, p), conv_out(w, k, s, p)) else {
        return Err(Error::Config(format!("primary: kernel {k} stride {s} does not fit a {h}x{w} map")));
    };
    (h, w) = (oh, ow);
    let caps_shape = |h: usize, w: usize| vec![n, d, w, h];
    layers.push(LayerDesc {
        name: "primary".into(),
        kind: LayerKind::PrimaryCaps,
        out_shape: caps_shape(h, w),
        params: n * d * (k * k + 1),
        per_type: true,
    });
    layers.push(LayerDesc { name: "prune".into(), kind: LayerKind::Prune, out_shape: caps_shape(h, w), params: 0, per_type: false });
    let router_params = match cfg.variant {
        Variant::Deep => 3 * d * d,
        Variant::Shallow => d * d,
    };
    let mut global = 0;
    for b in 0..cfg.blocks {
        for l in 0..cfg.layers_per_block {
            global += 1;
            let stride = if l == 0 { block_stride(cfg, b) } else { 1 };
            (h, w) = (conv_out(h, 3, stride, 1).unwrap(), conv_out(w, 3, stride, 1).unwrap());
            layers.push(LayerDesc {
                name: format!("c{global}"),
                kind: LayerKind::ConvCaps,
                out_shape: caps_shape(h, w),
                params: n * d * 10,
                per_type: true,
            });
            layers.push(LayerDesc {
                name: format!("c{global}.route"),
                kind: LayerKind::ConvCaps,
                out_shape: caps_shape(h, w),
                params: router_params,
                per_type: false,
            });
        }
        layers.push(LayerDesc {
            name: format!("block{}", b + 1),
            kind: LayerKind::Shortcut,
            out_shape: caps_shape(h, w),
            params: 0,
            per_type: false,
        });
    }
    layers.push(LayerDesc {
        name: "flat".into(),
        kind: LayerKind::FlatCaps,
        out_shape: vec![cfg.classes, d],
        params: n * cfg.classes * d * d,
        per_type: true,
    });
    Ok(LayerStack { layers })
}

/// Per-layer parameter counts with and without pruned capsule types.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub n_caps: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub layer: String,
    pub full: usize,
    pub pruned: usize,
}

impl ParamReport {
    pub fn total_full(&self) -> usize {
        self.rows.iter().map(|r| r.full).sum()
    }

    pub fn total_pruned(&self) -> usize {
        self.rows.iter().map(|r| r.pruned).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,full,pruned,delta\n");
        for r in &self.rows {
            s += &format!("{},{},{},{}\n", r.layer, r.full, r.pruned, r.full - r.pruned);
        }
        s += &format!(
            "total,{},{},{}\n",
            self.total_full(),
            self.total_pruned(),
            self.total_full() - self.total_pruned()
        );
        s
    }
}

/// Counts learnable scalars; with `keep`, per-type layers are sized for the
/// retained capsule types.
pub fn parameter_count(stack: &LayerStack, n_caps: usize, keep: Option<&[bool]>) -> ParamReport {
    let retained = keep.map_or(n_caps, |k| k.iter().filter(|&&x| x).count());
    let rows = stack
        .layers
        .iter()
        .filter(|l| l.params > 0)
        .map(|l| ParamRow {
            layer: l.name.clone(),
            full: l.params,
            pruned: if l.per_type { l.params / n_caps * retained } else { l.params },
        })
        .collect();
    ParamReport { rows, n_caps, retained }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        let w = Tensor::randn(&[cout, cin / groups, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias);
        Self { weight, bias, stride, padding, groups }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let b = p.var(self.bias);
        let c = b.shape()[0];
        x.conv2d(p.var(self.weight), self.stride, self.padding, self.groups)?.add(b.reshape(&[c, 1, 1])?)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Router {
    Attention(AttentionRoutingLayer),
    Simplified(SimplifiedRoutingLayer),
}

#[derive(Clone, Debug, PartialEq)]
struct ConvCapsLayer {
    conv: ConvLayer,
    router: Router,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    layers: Vec<ConvCapsLayer>,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct FlatCaps {
    predict: Projection,
}

/// Intermediate capsules recorded during a forward pass, `[B, n', d, W, H]`
/// over the retained types (all types for `pcl`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tap<T: Scalar = f64> {
    pub tag: String,
    pub caps: CapsuleTensor<T>,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Training mode: dropout on, mask from batch statistics.
    pub train: bool,
    pub rng: Option<&'a mut dyn RngCore>,
    /// Record capsules at every tagged layer.
    pub taps: bool,
    /// Overrides the mask used by the pruned layer.
    pub mask: Option<Vec<bool>>,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self { train: true, rng: Some(rng), ..Self::default() }
    }

    pub fn with_taps(mut self) -> Self {
        self.taps = true;
        self
    }
}

pub struct ForwardOutput<'g, T: Scalar = f64> {
    /// Class capsule lengths `[B, classes]`.
    pub lengths: Var<'g, T>,
    /// Class capsules `[B, classes, d]`.
    pub class_caps: Var<'g, T>,
    pub mask: PruneMask,
    pub taps: Vec<Tap<T>>,
    /// `(layer name, output shape without batch)` in execution order.
    pub shapes: Vec<(String, Vec<usize>)>,
}

/// A built model: configuration, parameters and the running prune mask.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub ema: PruneEma,
    stack: LayerStack,
    backbone: Vec<ConvLayer>,
    primary: ConvLayer,
    blocks: Vec<Block>,
    flat: FlatCaps,
}

/// `[B, C, H, W]` ↔ `[B, H, W, n, d]` with `C = n·d`.
fn conv_to_caps<'g, T: Scalar>(x: Var<'g, T>, n: usize, d: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.reshape(&[s[0], n, d, s[2], s[3]])?.permute(&[0, 3, 4, 1, 2])
}

fn caps_to_conv<'g, T: Scalar>(u: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = u.shape();
    u.permute(&[0, 3, 4, 1, 2])?.reshape(&[s[0], s[3] * s[4], s[1], s[2]])
}

/// `[B, H, W, n, d]` → `[B, n, d, W, H]`.
fn caps_value<T: Scalar>(u: &Tensor<T>) -> Result<CapsuleTensor<T>> {
    CapsuleTensor::new(u.permute(&[0, 3, 4, 2, 1])?)
}

fn caps_shape(s: &[usize]) -> Vec<usize> {
    vec![s[3], s[4], s[2], s[1]]
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let stack = build(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = cfg.input.0;
        let mut backbone = Vec::new();
        for (i, s) in cfg.backbone.iter().enumerate() {
            backbone.push(ConvLayer::new(&mut store, &format!("conv{}", i + 1), cin, s.channels, s.kernel, s.stride, s.padding, 1, &mut rng));
            cin = s.channels;
        }
        let (n, d) = (cfg.n_caps, cfg.d);
        let primary = ConvLayer::new(
            &mut store,
            "primary",
            cin,
            n * d,
            cfg.primary_kernel,
            cfg.primary_stride,
            cfg.primary_padding,
            cin,
            &mut rng,
        );
        let norm = cfg.normalizer();
        let mut blocks = Vec::new();
        let mut global = 0;
        for b in 0..cfg.blocks {
            let stride = block_stride(&cfg, b);
            let mut layers = Vec::new();
            for l in 0..cfg.layers_per_block {
                global += 1;
                let name = format!("c{global}");
                let s = if l == 0 { stride } else { 1 };
                let conv = ConvLayer::new(&mut store, &name, n * d, n * d, 3, s, 1, n * d, &mut rng);
                let router = match cfg.variant {
                    Variant::Deep => Router::Attention(AttentionRoutingLayer::new(
                        &mut store,
                        &format!("{name}.route"),
                        d,
                        cfg.heads,
                        norm,
                        cfg.orthogonal,
                        &mut rng,
                    )?),
                    Variant::Shallow => Router::Simplified(SimplifiedRoutingLayer::new(
                        &mut store,
                        &format!("{name}.route"),
                        d,
                        norm,
                        cfg.orthogonal,
                        &mut rng,
                    )),
                };
                layers.push(ConvCapsLayer { conv, router });
            }
            blocks.push(Block { layers, stride });
        }
        let predict = Projection::new(&mut store, "flat.w", n * cfg.classes, d, cfg.orthogonal, &mut rng);
        let ema = PruneEma::new(n);
        Ok(Self { cfg, store, ema, stack, backbone, primary, blocks, flat: FlatCaps { predict } })
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    /// Parameter counts, pruned layers sized by the frozen EMA mask.
    pub fn parameter_report(&self) -> ParamReport {
        parameter_count(&self.stack, self.cfg.n_caps, Some(&self.ema.frozen()))
    }

    /// `(name, ids)` of every orthogonal or dense routing map.
    pub fn routing_maps(&self) -> Vec<(String, Projection)> {
        let mut out = Vec::new();
        let mut global = 0;
        for b in &self.blocks {
            for l in &b.layers {
                global += 1;
                match &l.router {
                    Router::Attention(a) => {
                        for (tag, p) in ["wq", "wk", "wv"].iter().zip(a.projections()) {
                            out.push((format!("c{global}.{tag}"), p));
                        }
                    }
                    Router::Simplified(s) => out.push((format!("c{global}.wp"), s.wp)),
                }
            }
        }
        out.push(("flat".into(), self.flat.predict));
        out
    }

    /// Forward without gradient tracking.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = self.forward(&p, g.constant(x.clone()), ForwardOptions::eval())?;
        Ok(out.lengths.to_tensor())
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput<'g, T>> {
        let cfg = &self.cfg;
        let xs = x.shape();
        let (c, h, w) = cfg.input;
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::Dimension(format!("model expects [B, {c}, {h}, {w}], got {xs:?}")));
        }
        let g = x.graph();
        let (n, d) = (cfg.n_caps, cfg.d);
        let mut shapes = Vec::new();
        let mut taps = Vec::new();

        let mut y = x;
        for (i, layer) in self.backbone.iter().enumerate() {
            y = layer.forward(p, y)?.relu();
            shapes.push((format!("conv{}", i + 1), y.shape()[1..].to_vec()));
        }
        if opts.train && cfg.dropout > 0.0 {
            let rng = opts.rng.as_deref_mut().ok_or_else(|| Error::Contract("training forward needs an rng".into()))?;
            let keep = 1.0 - cfg.dropout;
            let scale = T::of(1.0 / keep);
            let shape = y.shape();
            let m = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { scale } else { T::zero() });
            y = y.mul_const(&m)?;
        }

        let u = conv_to_caps(self.primary.forward(p, y)?, n, d)?.squash()?;
        shapes.push(("primary".into(), caps_shape(&u.shape())));
        let u_val = caps_value(&u.value())?;
        if opts.taps {
            taps.push(Tap { tag: "pcl".into(), caps: u_val.clone() });
        }

        let batch_mask = prune_mask(&u_val, cfg.theta)?;
        let mask = match opts.mask.take() {
            Some(keep) => {
                if keep.len() != n {
                    return Err(Error::Dimension(format!("mask has {} entries for {n} capsule types", keep.len())));
                }
                PruneMask { keep, ..batch_mask }
            }
            None if opts.train => batch_mask,
            None => PruneMask { keep: self.ema.frozen(), ..batch_mask },
        };
        let keep = mask.keep.clone();
        let gate = g.constant(Tensor::from_fn(&[n, 1], |i| if keep[i] { T::one() } else { T::zero() }));
        let kept = mask.kept_in_order();
        let record = |tag: String, v: &Var<'g, T>, taps: &mut Vec<Tap<T>>| -> Result<()> {
            if opts.taps {
                taps.push(Tap { tag, caps: caps_value(&v.value())?.select(&kept)? });
            }
            Ok(())
        };
        let mut u = u.mul(gate)?;
        shapes.push(("prune".into(), caps_shape(&u.shape())));
        record("pruned".into(), &u, &mut taps)?;

        let mut global = 0;
        for (bi, block) in self.blocks.iter().enumerate() {
            let input = u;
            for layer in &block.layers {
                global += 1;
                let conv = layer.conv.forward(p, caps_to_conv(u)?)?;
                let v = conv_to_caps(conv, n, d)?;
                let vs = v.shape();
                let flat = v.reshape(&[vs[0] * vs[1] * vs[2], n, d])?;
                let routed = match &layer.router {
                    Router::Attention(a) => a.forward(p, flat, Some(&keep))?,
                    Router::Simplified(s) => s.forward(p, flat, Some(&keep))?,
                };
                u = routed.reshape(&vs)?.mul(gate)?;
                shapes.push((format!("c{global}"), caps_shape(&u.shape())));
                record(format!("c{global}"), &u, &mut taps)?;
            }
            let skip = if block.stride > 1 {
                let ch = n * d;
                let pick = g.constant(Tensor::ones(&[ch, 1, 1, 1]));
                conv_to_caps(caps_to_conv(input)?.conv2d(pick, block.stride, 0, ch)?, n, d)?
            } else {
                input
            };
            u = u.add(skip)?;
            shapes.push((format!("block{}", bi + 1), caps_shape(&u.shape())));
            record(format!("block{}", bi + 1), &u, &mut taps)?;
        }

        let class_caps = self.flat_caps(p, u)?;
        shapes.push(("flat".into(), class_caps.shape()[1..].to_vec()));
        let lengths = class_caps.l2norm(2, false)?;
        Ok(ForwardOutput { lengths, class_caps, mask, taps, shapes })
    }

    /// Votes `û_{j|i}` through per-(type, class) maps; agreement with the
    /// vote sum picks couplings over classes. Sums over inputs are averaged
    /// over spatial sites.
    fn flat_caps<'g>(&self, p: &Bound<'g, T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let (n, d, m) = (self.cfg.n_caps, self.cfg.d, self.cfg.classes);
        let s = u.shape();
        let (b, sites) = (s[0], s[1] * s[2]);
        let u = u.reshape(&[b, sites, n, d])?;
        let u_hat = votes(p, &self.flat.predict, u, m)?.reshape(&[b, sites * n, m, d])?;
        let per_site = 1.0 / sites as f64;
        let total = u_hat.sum(1, true)?.scale(per_site);
        let logits = u_hat.mul(total)?.sum(3, false)?.scale(1.0 / (d as f64).sqrt());
        let c = self.cfg.normalizer().apply(logits, None)?;
        let weighted = u_hat.mul(c.reshape(&[b, sites * n, m, 1])?)?;
        weighted.sum(1, false)?.scale(per_site).squash()
    }
}

/// Standard-normal draw used by callers that need a model-independent input.
pub fn random_input<T: Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (c, h, w) = cfg.input;
    Tensor::from_fn(&[batch, c, h, w], |_| T::of(normal.sample(&mut rng)))
}
