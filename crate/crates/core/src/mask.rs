//! Binary masks and the affine weight transformation
//! `W̃ = k0·W + k1·1 + k2·M + k3·(W∘M)`.
//!
//! A mask `M` is the hard threshold `1[r ≥ 0]` of a real-valued matrix `R`.
//! The forward pass always uses the exact threshold; the backward pass
//! replaces its derivative with that of a strictly increasing surrogate, so the
//! gradient with respect to `r` has the sign of the gradient with respect to `m`.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

/// Range of the uniform distribution real masks are drawn from.
pub const MASK_INIT_RANGE: (f32, f32) = (1e-4, 2e-4);

/// Hard threshold `h(r) = 1[r ≥ 0]`.
#[inline]
pub fn threshold(r: f32) -> f32 {
    if r >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Function whose derivative stands in for the threshold's in the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Surrogate {
    /// `h̃(x) = x`: the straight-through estimator.
    #[default]
    Identity,
    /// `h̃(x) = σ(x)`.
    Sigmoid,
}

impl Surrogate {
    /// `h̃'(r)`, strictly positive for finite `r`.
    #[inline]
    pub fn derivative(self, r: f32) -> f32 {
        match self {
            Surrogate::Identity => 1.0,
            Surrogate::Sigmoid => {
                let s = sigmoid(r);
                s * (1.0 - s)
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Surrogate::Identity => 0,
            Surrogate::Sigmoid => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Surrogate::Identity),
            1 => Ok(Surrogate::Sigmoid),
            _ => Err(Error::Format(format!("unknown surrogate code {code}"))),
        }
    }
}

impl fmt::Display for Surrogate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Surrogate::Identity => "identity",
            Surrogate::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Surrogate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "ste" => Ok(Surrogate::Identity),
            "sigmoid" => Ok(Surrogate::Sigmoid),
            _ => Err(Error::Config(format!("unknown surrogate `{s}` (expected identity or sigmoid)"))),
        }
    }
}

/// Real-valued training state of a mask; same shape as the masked weight.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMask {
    pub values: Tensor,
}

impl RealMask {
    /// Draws every entry from `U[1e-4, 2e-4]`, so the mask starts all ones.
    pub fn init(shape: &[usize], rng: &mut DetRng) -> Self {
        let n = shape.iter().product();
        let (lo, hi) = MASK_INIT_RANGE;
        let values = Tensor::new(shape, rng::uniform_vec(rng, n, lo, hi)).expect("shape matches");
        RealMask { values }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// A `{0,1}` tensor; bit `i` is set iff the real mask entry `i` is `≥ 0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim(format!("mask shape {shape:?} does not hold {} bits", bits.len())));
        }
        Ok(BinaryMask { shape: shape.to_vec(), bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        BinaryMask { shape: shape.to_vec(), bits: vec![true; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        BinaryMask { shape: shape.to_vec(), bits: vec![false; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn numel(&self) -> usize {
        self.bits.len()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&self.shape, data).expect("shape matches")
    }
}

pub fn binarize(r: &RealMask) -> BinaryMask {
    BinaryMask { shape: r.shape().to_vec(), bits: r.values.data().iter().map(|&v| v >= 0.0).collect() }
}

/// Records `m = h(r)` with the surrogate's derivative attached for backward.
pub fn record_binarize(tape: &mut Tape, r: Var, surrogate: Surrogate) -> Var {
    tape.custom_grad(r, threshold, move |v| surrogate.derivative(v))
}

/// Gradient with respect to `r` given the gradient with respect to `m = h(r)`.
pub fn surrogate_backward(grad_out: &Tensor, r: &Tensor, surrogate: Surrogate) -> Result<Tensor> {
    if grad_out.shape() != r.shape() {
        return Err(Error::dim(format!(
            "surrogate_backward: gradient {:?} vs mask {:?}",
            grad_out.shape(),
            r.shape()
        )));
    }
    let data = grad_out.data().iter().zip(r.data()).map(|(g, &v)| g * surrogate.derivative(v)).collect();
    Tensor::new(r.shape(), data)
}

/// Percentage of ones in the mask, in `[0, 100]`.
pub fn density(m: &BinaryMask) -> Result<f32> {
    if m.numel() == 0 {
        return Err(Error::Empty("density of an empty mask"));
    }
    Ok(100.0 * m.count_ones() as f32 / m.numel() as f32)
}

/// How one of `k0..k3` is treated for a given variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KPolicy {
    Fixed(f32),
    Learned { init: f32 },
}

/// Whether learned scalars are one per layer or one per output channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Granularity {
    #[default]
    PerLayer,
    PerChannel,
}

impl Granularity {
    pub fn code(self) -> u8 {
        match self {
            Granularity::PerLayer => 0,
            Granularity::PerChannel => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Granularity::PerLayer),
            1 => Ok(Granularity::PerChannel),
            _ => Err(Error::Format(format!("unknown granularity code {code}"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerLayer => "layer",
            Granularity::PerChannel => "channel",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" | "per-layer" => Ok(Granularity::PerLayer),
            "channel" | "per-channel" | "channel-wise" => Ok(Granularity::PerChannel),
            _ => Err(Error::Config(format!("unknown granularity `{s}` (expected layer or channel)"))),
        }
    }
}

/// Named transform variants plus arbitrary per-`k` policies.
#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub enum Variant {
    /// All four scalars (k0 subject to the batch-norm rule).
    #[default]
    Full,
    /// `k3 = 0`.
    Simple,
    /// `W∘M` only: `k = (0, 0, 0, 1)`, all fixed.
    Piggyback,
    /// Full with `k1 = 0`.
    FullNoBias,
    /// Full with `k2 = 0`.
    FullNoK2,
    /// Simple with `k1 = 0`.
    SimpleNoBias,
    Custom([KPolicy; 4]),
}

const LEARN_ONE: KPolicy = KPolicy::Learned { init: 1.0 };
const LEARN_ZERO: KPolicy = KPolicy::Learned { init: 0.0 };
const ZERO: KPolicy = KPolicy::Fixed(0.0);
const ONE: KPolicy = KPolicy::Fixed(1.0);

impl Variant {
    /// Policies before the batch-norm rule is applied.
    pub fn policies(self) -> [KPolicy; 4] {
        match self {
            Variant::Full => [LEARN_ONE, LEARN_ZERO, LEARN_ZERO, LEARN_ZERO],
            Variant::Simple => [LEARN_ONE, LEARN_ZERO, LEARN_ZERO, ZERO],
            Variant::Piggyback => [ZERO, ZERO, ZERO, ONE],
            Variant::FullNoBias => [LEARN_ONE, ZERO, LEARN_ZERO, LEARN_ZERO],
            Variant::FullNoK2 => [LEARN_ONE, LEARN_ZERO, ZERO, LEARN_ZERO],
            Variant::SimpleNoBias => [LEARN_ONE, ZERO, LEARN_ZERO, ZERO],
            Variant::Custom(p) => p,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::Simple => 1,
            Variant::Piggyback => 2,
            Variant::FullNoBias => 3,
            Variant::FullNoK2 => 4,
            Variant::SimpleNoBias => 5,
            Variant::Custom(_) => 255,
        }
    }

    pub fn from_code(code: u8, policies: [KPolicy; 4]) -> Result<Self> {
        Ok(match code {
            0 => Variant::Full,
            1 => Variant::Simple,
            2 => Variant::Piggyback,
            3 => Variant::FullNoBias,
            4 => Variant::FullNoK2,
            5 => Variant::SimpleNoBias,
            255 => Variant::Custom(policies),
            _ => return Err(Error::Format(format!("unknown variant code {code}"))),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::Simple => f.write_str("simple"),
            Variant::Piggyback => f.write_str("piggyback"),
            Variant::FullNoBias => f.write_str("full-no-bias"),
            Variant::FullNoK2 => f.write_str("full-no-k2"),
            Variant::SimpleNoBias => f.write_str("simple-no-bias"),
            Variant::Custom(p) => {
                f.write_str("custom:")?;
                for (i, k) in p.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    match k {
                        KPolicy::Fixed(v) => write!(f, "{v}")?,
                        KPolicy::Learned { init } => write!(f, "learned={init}")?,
                    }
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the named variants or `custom:<k0>,<k1>,<k2>,<k3>` where each
    /// entry is a fixed number, `learned`, or `learned=<init>`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "simple" => Variant::Simple,
            "piggyback" => Variant::Piggyback,
            "full-no-bias" => Variant::FullNoBias,
            "full-no-k2" => Variant::FullNoK2,
            "simple-no-bias" => Variant::SimpleNoBias,
            _ => {
                let spec = s
                    .strip_prefix("custom:")
                    .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))?;
                let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
                let [a, b, c, d] = parts[..] else {
                    return Err(Error::Config(format!("custom variant needs four entries: `{s}`")));
                };
                let parse = |p: &str| -> Result<KPolicy> {
                    let bad = || Error::Config(format!("bad custom k entry `{p}`"));
                    match p.strip_prefix("learned") {
                        Some("") => Ok(KPolicy::Learned { init: 0.0 }),
                        Some(rest) => {
                            let init = rest.strip_prefix('=').ok_or_else(bad)?.parse().map_err(|_| bad())?;
                            Ok(KPolicy::Learned { init })
                        }
                        None => p.parse().map(KPolicy::Fixed).map_err(|_| bad()),
                    }
                };
                Variant::Custom([parse(a)?, parse(b)?, parse(c)?, parse(d)?])
            }
        })
    }
}

/// Per-domain transform policy shared by every masked layer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskTransformConfig {
    pub variant: Variant,
    pub surrogate: Surrogate,
    pub granularity: Granularity,
}


impl MaskTransformConfig {
    pub fn new(variant: Variant) -> Self {
        MaskTransformConfig { variant, ..Default::default() }
    }

    /// Policies for one layer. A learned `k0` is pinned to `Fixed(1)` when the
    /// layer feeds a batch norm, whose output ignores the weight scale.
    pub fn layer_policies(&self, followed_by_bn: bool) -> [KPolicy; 4] {
        let mut p = self.variant.policies();
        if followed_by_bn && matches!(p[0], KPolicy::Learned { .. }) {
            p[0] = KPolicy::Fixed(1.0);
        }
        p
    }

    /// Fresh scalars for a layer with `out_channels` output channels.
    pub fn init_scalars(&self, out_channels: usize, followed_by_bn: bool) -> AffineScalars {
        let shape: &[usize] = match self.granularity {
            Granularity::PerLayer => &[],
            Granularity::PerChannel => &[out_channels],
        };
        let k = self.layer_policies(followed_by_bn).map(|p| match p {
            KPolicy::Fixed(v) => Scalar::Fixed(v),
            KPolicy::Learned { init } => Scalar::Learned(Tensor::full(shape, init)),
        });
        AffineScalars { k, granularity: self.granularity }
    }

    /// The dedicated `W∘M` path applies.
    pub fn is_piggyback(&self) -> bool {
        self.variant == Variant::Piggyback
    }
}

/// One of `k0..k3`: a constant or a trainable tensor (scalar or `[Cout]`).
#[derive(Clone, Debug, PartialEq)]
pub enum Scalar {
    Fixed(f32),
    Learned(Tensor),
}

impl Scalar {
    pub fn is_learned(&self) -> bool {
        matches!(self, Scalar::Learned(_))
    }

    pub fn learned(&self) -> Option<&Tensor> {
        match self {
            Scalar::Learned(t) => Some(t),
            Scalar::Fixed(_) => None,
        }
    }

    /// Mean value (the constant itself when fixed).
    pub fn mean(&self) -> f32 {
        match self {
            Scalar::Fixed(v) => *v,
            Scalar::Learned(t) => t.mean(),
        }
    }
}

/// `k0..k3` of one masked layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineScalars {
    pub k: [Scalar; 4],
    pub granularity: Granularity,
}

impl AffineScalars {
    /// Fixed scalars `(k0, k1, k2, k3)`.
    pub fn fixed(k: [f32; 4]) -> Self {
        AffineScalars { k: k.map(Scalar::Fixed), granularity: Granularity::PerLayer }
    }

    /// Learned scalars with the given values, one per layer.
    pub fn learned(k: [f32; 4]) -> Self {
        AffineScalars { k: k.map(|v| Scalar::Learned(Tensor::scalar(v))), granularity: Granularity::PerLayer }
    }

    /// Number of learned values across the four scalars.
    pub fn learned_count(&self) -> usize {
        self.k.iter().filter_map(Scalar::learned).map(Tensor::numel).sum()
    }

    /// Checks shapes and the batch-norm rule for a layer with `out_channels`.
    pub fn validate(&self, out_channels: usize, followed_by_bn: bool) -> Result<()> {
        for (i, s) in self.k.iter().enumerate() {
            if let Scalar::Learned(t) = s {
                let ok = match self.granularity {
                    Granularity::PerLayer => t.numel() == 1,
                    Granularity::PerChannel => t.shape() == [out_channels],
                };
                if !ok {
                    return Err(Error::dim(format!(
                        "k{i} has shape {:?}, inconsistent with {} granularity over {out_channels} channels",
                        t.shape(),
                        self.granularity
                    )));
                }
            }
        }
        if followed_by_bn && self.k[0].is_learned() {
            return Err(Error::Config("k0 must be fixed for a layer followed by batch norm".into()));
        }
        Ok(())
    }

    /// Records each scalar on the tape: learned values become trainable
    /// leaves when `trainable`, constants otherwise.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> [KTerm; 4] {
        std::array::from_fn(|i| match &self.k[i] {
            Scalar::Fixed(v) => KTerm::Fixed(*v),
            Scalar::Learned(t) if trainable => KTerm::Var(tape.param(t.clone())),
            Scalar::Learned(t) => KTerm::Var(tape.constant(t.clone())),
        })
    }
}

/// A scalar as seen by the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KTerm {
    Fixed(f32),
    Var(Var),
}

impl KTerm {
    pub fn var(self) -> Option<Var> {
        match self {
            KTerm::Var(v) => Some(v),
            KTerm::Fixed(_) => None,
        }
    }
}

/// `k·x` with fixed zeros dropped and fixed ones passed through.
fn scaled(tape: &mut Tape, k: KTerm, x: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Option<Var>> {
    match k {
        KTerm::Fixed(c) if c == 0.0 => Ok(None),
        KTerm::Fixed(c) if c == 1.0 => x(tape).map(Some),
        KTerm::Fixed(c) => {
            let x = x(tape)?;
            Ok(Some(tape.mul_const(x, c)))
        }
        KTerm::Var(kv) => {
            let x = x(tape)?;
            tape.scale_channels(x, kv).map(Some)
        }
    }
}

/// Records `k0·W + k1·1 + k2·M + k3·(W∘M)`, summed in that order.
///
/// Terms whose scalar is a fixed zero are omitted.
pub fn record_transform(tape: &mut Tape, w: Var, m: Var, k: &[KTerm; 4]) -> Result<Var> {
    if tape.shape(w) != tape.shape(m) {
        return Err(Error::dim(format!("mask {:?} does not match weight {:?}", tape.shape(m), tape.shape(w))));
    }
    let shape = tape.shape(w).to_vec();
    let mut terms = Vec::with_capacity(4);
    terms.extend(scaled(tape, k[0], |_| Ok(w))?);
    match k[1] {
        KTerm::Fixed(c) if c == 0.0 => {}
        KTerm::Fixed(c) => terms.push(tape.constant(Tensor::full(&shape, c))),
        KTerm::Var(kv) => terms.push(tape.broadcast_channels(kv, &shape)?),
    }
    terms.extend(scaled(tape, k[2], |_| Ok(m))?);
    terms.extend(scaled(tape, k[3], |t| t.mul(w, m))?);

    let mut iter = terms.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(tape.constant(Tensor::zeros(&shape)));
    };
    for term in iter {
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Records the dedicated multiplicative path `W∘M`.
pub fn record_piggyback(tape: &mut Tape, w: Var, m: Var) -> Result<Var> {
    tape.mul(w, m)
}

/// Evaluates the transform on concrete tensors.
pub fn transform_weights(w: &Tensor, m: &BinaryMask, k: &AffineScalars) -> Result<Tensor> {
    if w.shape() != m.shape() {
        return Err(Error::dim(format!("mask {:?} does not match weight {:?}", m.shape(), w.shape())));
    }
    let out_channels = w.shape().first().copied().unwrap_or(1);
    k.validate(out_channels, false)?;
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let mv = tape.constant(m.to_tensor());
    let kt = k.record(&mut tape, false);
    let out = record_transform(&mut tape, wv, mv, &kt)?;
    Ok(tape.value(out).clone())
}
