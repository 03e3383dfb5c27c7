//! Domain networks: a frozen shared backbone plus per-domain parameters.

pub mod arch;
mod backbone;
mod domain;
mod forward;

pub use arch::{ArchSpec, LayerPlan, LayerSpec};
pub use backbone::{BaseModel, Backbone};
pub use domain::{add_domain, forgetting_check, DomainNet, DomainParams, MaskGrad, MaskState, MaskedLayer, Trainable};
pub use forward::{Binding, Recorded};

use crate::autograd::RunningStats;
use crate::error::Result;
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies one trainable tensor of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    /// Raw weight of a masked-layer slot (backbone training only).
    Weight(usize),
    /// Real-valued mask of a masked layer.
    Mask(usize),
    /// `k{index}` of a masked layer.
    K { layer: usize, index: usize },
    BnGamma(usize),
    BnBeta(usize),
    HeadWeight,
    HeadBias,
}

impl ParamId {
    pub fn is_head(self) -> bool {
        matches!(self, ParamId::HeadWeight | ParamId::HeadBias)
    }
}

/// Access to trainable tensors by id.
pub trait Parameters {
    fn param(&self, id: ParamId) -> Option<&Tensor>;
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor>;
}

/// Scale, shift and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running: RunningStats::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Scale, shift, mean and variance: four values per channel.
    pub fn stored_values(&self) -> usize {
        4 * self.channels()
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend(self.gamma.to_le_bytes());
        out.extend(self.beta.to_le_bytes());
        for v in self.running.mean.iter().chain(&self.running.var) {
            out.extend(v.to_le_bytes());
        }
    }
}

/// Dense classification head `x · Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    /// He-normal weights, zero bias.
    pub fn init(in_dim: usize, num_classes: usize, rng: &mut DetRng) -> Self {
        let std = (2.0 / in_dim as f32).sqrt();
        Classifier {
            weight: Tensor::new(&[num_classes, in_dim], rng::normal_vec(rng, num_classes * in_dim, std))
                .expect("shape matches"),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Top-1 accuracy of `[N, K]` logits.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let pred = logits.argmax_rows()?;
    if labels.is_empty() {
        return Err(crate::Error::Empty("accuracy over zero examples"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f32 / labels.len() as f32)
}
