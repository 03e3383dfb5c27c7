//! Layer topologies and their plain-text description.
//!
//! One layer per line, `kind key=value ...`; `#` starts a comment:
//!
//! ```text
//! name smallnet
//! input 1x16x16
//! conv out=8 kernel=3 stride=1 pad=1
//! bn
//! relu
//! maxpool size=2
//! dense out=32
//! ```
//!
//! The per-domain classifier is not part of the description; it is always
//! appended after the last layer, on the flattened features.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autograd::kernels::ConvGeom;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Bias-free convolution.
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm,
    Relu,
    MaxPool { size: usize },
    /// Bias-free hidden fully-connected layer; flattens its input.
    Dense { out: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Shape bookkeeping for one layer of a validated architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub spec: LayerSpec,
    /// Per-sample output shape.
    pub out_shape: Vec<usize>,
    /// Weight shape and index among masked layers, for conv and dense.
    pub masked: Option<(usize, Vec<usize>)>,
    /// Channel count and index among batch-norm layers.
    pub bn: Option<(usize, usize)>,
    /// For masked layers: the next layer is a batch norm.
    pub followed_by_bn: bool,
}

pub const SMALLNET: &str = "\
name smallnet
input 1x16x16
conv out=8 kernel=3 stride=1 pad=1
bn
relu
maxpool size=2
conv out=16 kernel=3 stride=1 pad=1
bn
relu
maxpool size=2
";

pub const TINYNET: &str = "\
name tinynet
input 1x16x16
conv out=8 kernel=3 stride=1 pad=1
bn
relu
maxpool size=2
";

impl ArchSpec {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "smallnet" => Some(Self::parse(SMALLNET).expect("preset parses")),
            "tinynet" => Some(Self::parse(TINYNET).expect("preset parses")),
            _ => None,
        }
    }

    pub fn smallnet() -> Self {
        Self::preset("smallnet").expect("preset exists")
    }

    pub fn tinynet() -> Self {
        Self::preset("tinynet").expect("preset exists")
    }

    /// A preset name or a full textual description.
    pub fn resolve(name_or_text: &str) -> Result<Self> {
        match Self::preset(name_or_text.trim()) {
            Some(spec) => Ok(spec),
            None => Self::parse(name_or_text),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("custom");
        let mut input = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Arch(format!("line {}: {msg}", lineno + 1));
            let mut words = line.split_whitespace();
            let kind = words.next().expect("non-empty line");
            let rest: Vec<&str> = words.collect();
            let kv = || -> Result<BTreeMap<&str, usize>> {
                rest.iter()
                    .map(|w| {
                        let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{w}`")))?;
                        let v = v.parse().map_err(|_| err(format!("`{v}` is not a non-negative integer")))?;
                        Ok((k, v))
                    })
                    .collect()
            };
            let take = |map: &mut BTreeMap<&str, usize>, key: &str, default: Option<usize>| {
                map.remove(key).or(default).ok_or_else(|| err(format!("`{kind}` needs `{key}=`")))
            };
            let finish = |map: BTreeMap<&str, usize>| match map.keys().next() {
                Some(k) => Err(err(format!("unknown key `{k}` for `{kind}`"))),
                None => Ok(()),
            };
            match kind {
                "name" => {
                    let [n] = rest[..] else { return Err(err("`name` takes one word".into())) };
                    name = n.to_string();
                }
                "input" => {
                    let [dims] = rest[..] else { return Err(err("`input` takes CxHxW".into())) };
                    let parsed: Vec<usize> = dims
                        .split('x')
                        .map(|d| d.parse().map_err(|_| err(format!("bad input dims `{dims}`"))))
                        .collect::<Result<_>>()?;
                    let [c, h, w] = parsed[..] else { return Err(err("`input` takes CxHxW".into())) };
                    input = Some([c, h, w]);
                }
                "conv" => {
                    let mut m = kv()?;
                    let layer = LayerSpec::Conv {
                        out_channels: take(&mut m, "out", None)?,
                        kernel: take(&mut m, "kernel", None)?,
                        stride: take(&mut m, "stride", Some(1))?,
                        pad: take(&mut m, "pad", Some(0))?,
                    };
                    finish(m)?;
                    layers.push(layer);
                }
                "maxpool" => {
                    let mut m = kv()?;
                    let layer = LayerSpec::MaxPool { size: take(&mut m, "size", Some(2))? };
                    finish(m)?;
                    layers.push(layer);
                }
                "dense" => {
                    let mut m = kv()?;
                    let layer = LayerSpec::Dense { out: take(&mut m, "out", None)? };
                    finish(m)?;
                    layers.push(layer);
                }
                "bn" | "relu" => {
                    if !rest.is_empty() {
                        return Err(err(format!("`{kind}` takes no arguments")));
                    }
                    layers.push(if kind == "bn" { LayerSpec::BatchNorm } else { LayerSpec::Relu });
                }
                other => return Err(err(format!("unknown layer kind `{other}`"))),
            }
        }
        let input = input.ok_or_else(|| Error::Arch("missing `input CxHxW` line".into()))?;
        let spec = ArchSpec { name, input, layers };
        spec.plan()?;
        Ok(spec)
    }

    /// Canonical text form; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [c, h, w] = self.input;
        let _ = writeln!(s, "name {}\ninput {c}x{h}x{w}", self.name);
        for layer in &self.layers {
            let _ = match layer {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    writeln!(s, "conv out={out_channels} kernel={kernel} stride={stride} pad={pad}")
                }
                LayerSpec::BatchNorm => writeln!(s, "bn"),
                LayerSpec::Relu => writeln!(s, "relu"),
                LayerSpec::MaxPool { size } => writeln!(s, "maxpool size={size}"),
                LayerSpec::Dense { out } => writeln!(s, "dense out={out}"),
            };
        }
        s
    }

    /// Validates the topology and derives per-layer shapes.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        if self.layers.is_empty() {
            return Err(Error::Arch("architecture has no layers".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Arch(format!("input shape {:?} has a zero dimension", self.input)));
        }
        let mut shape = self.input.to_vec();
        let (mut n_masked, mut n_bn) = (0, 0);
        let mut plans: Vec<LayerPlan> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Arch(format!("layer {i} ({layer:?}): {msg}"));
            let mut masked = None;
            let mut bn = None;
            match *layer {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let &[c, h, w] = &shape[..] else {
                        return Err(err(format!("convolution needs a CxHxW input, got {shape:?}")));
                    };
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(err("out, kernel and stride must be positive".into()));
                    }
                    let oh = ConvGeom::out_extent(h, kernel, stride, pad);
                    let ow = ConvGeom::out_extent(w, kernel, stride, pad);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(err(format!("no integer output size for {h}x{w} input")));
                    };
                    masked = Some((n_masked, vec![out_channels, c, kernel, kernel]));
                    n_masked += 1;
                    shape = vec![out_channels, oh, ow];
                }
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(err("dense width must be positive".into()));
                    }
                    let din: usize = shape.iter().product();
                    masked = Some((n_masked, vec![out, din]));
                    n_masked += 1;
                    shape = vec![out];
                }
                LayerSpec::BatchNorm => {
                    bn = Some((shape[0], n_bn));
                    n_bn += 1;
                    if let Some(prev) = plans.last_mut() {
                        prev.followed_by_bn = prev.masked.is_some();
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool { size } => {
                    let &[c, h, w] = &shape[..] else {
                        return Err(err(format!("pooling needs a CxHxW input, got {shape:?}")));
                    };
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(err(format!("{h}x{w} is not divisible by {size}")));
                    }
                    shape = vec![c, h / size, w / size];
                }
            }
            plans.push(LayerPlan { spec: *layer, out_shape: shape.clone(), masked, bn, followed_by_bn: false });
        }
        Ok(plans)
    }

    /// Length of the flattened feature vector fed to the classifier.
    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.plan()?.last().expect("non-empty").out_shape.iter().product())
    }
}
