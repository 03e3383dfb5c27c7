use crate::autograd::{Tape, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::mask::{self, binarize, AffineScalars, BinaryMask, MaskTransformConfig, RealMask, Scalar};
use crate::rng;
use crate::tensor::Tensor;

use super::backbone::Backbone;
use super::forward::{record_network, BnBinding, Binding, Recorded};
use super::{BnParams, Classifier, Mode, ParamId, Parameters};

/// Mask of one layer: real-valued while training, binary once deployed.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskState {
    Real(RealMask),
    Binary(BinaryMask),
}

impl MaskState {
    pub fn binary(&self) -> BinaryMask {
        match self {
            MaskState::Real(r) => binarize(r),
            MaskState::Binary(b) => b.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            MaskState::Real(r) => r.shape(),
            MaskState::Binary(b) => b.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLayer {
    pub mask: MaskState,
    pub scalars: AffineScalars,
}

/// Everything private to one domain: masks, affine scalars, batch norms and
/// classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainParams {
    pub id: String,
    pub config: MaskTransformConfig,
    /// Digest of the backbone these parameters were created for.
    pub backbone_digest: u64,
    pub layers: Vec<MaskedLayer>,
    pub bn: Vec<BnParams>,
    pub head: Classifier,
}

/// How masks enter a recorded pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGrad {
    /// Binary constants.
    Frozen,
    /// `h(r)` with the configured surrogate derivative; `ParamId::Mask` is `r`.
    Surrogate,
    /// The binary values as continuous leaves; `ParamId::Mask` is `m` itself.
    Leaf,
}

/// Which parts of a domain receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub masks: MaskGrad,
    pub scalars: bool,
    pub bn: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { masks: MaskGrad::Surrogate, scalars: true, bn: true, head: true };
    pub const NONE: Trainable = Trainable { masks: MaskGrad::Frozen, scalars: false, bn: false, head: false };
    pub const HEAD_ONLY: Trainable = Trainable { masks: MaskGrad::Frozen, scalars: false, bn: false, head: true };
}

/// Registers a new domain on a frozen backbone.
///
/// Masks start in `U[1e-4, 2e-4]` (all ones), scalars start at the identity
/// transform, batch norms are copied from the backbone and the classifier is
/// freshly initialized, so the new feature extractor equals the backbone's.
pub fn add_domain(
    backbone: &Backbone,
    id: impl Into<String>,
    num_classes: usize,
    config: MaskTransformConfig,
    seed: u64,
) -> Result<DomainParams> {
    if num_classes < 2 {
        return Err(Error::Config(format!("a domain needs at least 2 classes, got {num_classes}")));
    }
    let mut mask_rng = rng::stream(seed, 0);
    let layers = backbone
        .weights()
        .iter()
        .zip(backbone.masked_followed_by_bn())
        .map(|(w, followed_by_bn)| MaskedLayer {
            mask: MaskState::Real(RealMask::init(w.shape(), &mut mask_rng)),
            scalars: config.init_scalars(w.shape()[0], followed_by_bn),
        })
        .collect();
    let head = Classifier::init(backbone.feature_dim(), num_classes, &mut rng::stream(seed, 1));
    Ok(DomainParams {
        id: id.into(),
        config,
        backbone_digest: backbone.digest(),
        layers,
        bn: backbone.bn().to_vec(),
        head,
    })
}

/// `true` iff the backbone still has the digest recorded before training.
pub fn forgetting_check(backbone: &Backbone, before_digest: u64) -> bool {
    backbone.digest() == before_digest
}

impl DomainParams {
    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn binary_masks(&self) -> Vec<BinaryMask> {
        self.layers.iter().map(|l| l.mask.binary()).collect()
    }

    /// Replaces real masks by their binary view.
    pub fn freeze_masks(&mut self) {
        for layer in &mut self.layers {
            if let MaskState::Real(r) = &layer.mask {
                layer.mask = MaskState::Binary(binarize(r));
            }
        }
    }

    /// Checks that these parameters fit `backbone`.
    pub fn validate(&self, backbone: &Backbone) -> Result<()> {
        if self.backbone_digest != backbone.digest() {
            return Err(Error::DigestMismatch { expected: self.backbone_digest, found: backbone.digest() });
        }
        if self.layers.len() != backbone.weights().len() || self.bn.len() != backbone.bn().len() {
            return Err(Error::Arch("domain layer count does not match the backbone".into()));
        }
        for ((layer, w), followed_by_bn) in
            self.layers.iter().zip(backbone.weights()).zip(backbone.masked_followed_by_bn())
        {
            if layer.mask.shape() != w.shape() {
                return Err(Error::dim(format!("mask {:?} vs weight {:?}", layer.mask.shape(), w.shape())));
            }
            layer.scalars.validate(w.shape()[0], followed_by_bn)?;
        }
        for (b, base) in self.bn.iter().zip(backbone.bn()) {
            if b.channels() != base.channels() {
                return Err(Error::dim("domain batch norm channel count differs from backbone"));
            }
        }
        if self.head.in_dim() != backbone.feature_dim() {
            return Err(Error::dim(format!(
                "classifier expects {} features, backbone yields {}",
                self.head.in_dim(),
                backbone.feature_dim()
            )));
        }
        Ok(())
    }

    /// Records the domain network `f_i` on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape,
        backbone: &Backbone,
        x: Var,
        mode: Mode,
        trainable: Trainable,
    ) -> Result<(Recorded, Binding)> {
        let mut binding = Binding::default();
        let leaf = |tape: &mut Tape, t: &Tensor, train: bool| if train { tape.param(t.clone()) } else { tape.constant(t.clone()) };

        for (i, (layer, w)) in self.layers.iter().zip(backbone.weights()).enumerate() {
            let wv = tape.constant(w.clone());
            let m = match (trainable.masks, &layer.mask) {
                (MaskGrad::Surrogate, MaskState::Real(r)) => {
                    let rv = tape.param(r.values.clone());
                    binding.params.push((ParamId::Mask(i), rv));
                    mask::record_binarize(tape, rv, self.config.surrogate)
                }
                (MaskGrad::Surrogate, MaskState::Binary(_)) => {
                    return Err(Error::Config(format!(
                        "layer {i} holds a binary mask only; load the real-valued mask to train it"
                    )))
                }
                (MaskGrad::Leaf, state) => {
                    let mv = tape.param(state.binary().to_tensor());
                    binding.params.push((ParamId::Mask(i), mv));
                    mv
                }
                (MaskGrad::Frozen, state) => tape.constant(state.binary().to_tensor()),
            };
            binding.masks.push(m);
            let weight = if self.config.is_piggyback() {
                mask::record_piggyback(tape, wv, m)?
            } else {
                let k = layer.scalars.record(tape, trainable.scalars);
                if trainable.scalars {
                    for (index, term) in k.iter().enumerate() {
                        if let Some(v) = term.var() {
                            binding.params.push((ParamId::K { layer: i, index }, v));
                        }
                    }
                }
                mask::record_transform(tape, wv, m, &k)?
            };
            binding.weights.push(weight);
        }

        let mut bn = Vec::with_capacity(self.bn.len());
        for (j, b) in self.bn.iter().enumerate() {
            let gamma = leaf(tape, &b.gamma, trainable.bn);
            let beta = leaf(tape, &b.beta, trainable.bn);
            if trainable.bn {
                binding.params.push((ParamId::BnGamma(j), gamma));
                binding.params.push((ParamId::BnBeta(j), beta));
            }
            let running = (mode == Mode::Eval).then_some(&b.running);
            bn.push(BnBinding { gamma, beta, running });
        }

        let hw = leaf(tape, &self.head.weight, trainable.head);
        let hb = leaf(tape, &self.head.bias, trainable.head);
        if trainable.head {
            binding.params.push((ParamId::HeadWeight, hw));
            binding.params.push((ParamId::HeadBias, hb));
        }
        let rec = record_network(tape, backbone.plan(), &binding.weights, &bn, (hw, hb), x)?;
        Ok((rec, binding))
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn update_running(&mut self, rec: &Recorded) {
        for (b, stats) in self.bn.iter_mut().zip(&rec.batch_stats) {
            if let Some(stats) = stats {
                b.running.update(stats, BN_MOMENTUM);
            }
        }
    }

    /// Eval-mode logits.
    pub fn predict(&self, backbone: &Backbone, x: &Tensor) -> Result<Tensor> {
        backbone.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (rec, _) = self.record(&mut tape, backbone, xv, Mode::Eval, Trainable::NONE)?;
        Ok(tape.value(rec.logits).clone())
    }

    /// Eval-mode features `[N, D]`.
    pub fn features(&self, backbone: &Backbone, x: &Tensor) -> Result<Tensor> {
        backbone.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (rec, _) = self.record(&mut tape, backbone, xv, Mode::Eval, Trainable::NONE)?;
        Ok(tape.value(rec.features).clone())
    }

    /// The transformed weights the domain network uses, per masked layer.
    pub fn effective_weights(&self, backbone: &Backbone) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .zip(backbone.weights())
            .map(|(l, w)| {
                let m = l.mask.binary();
                if self.config.is_piggyback() {
                    mask::transform_weights(w, &m, &AffineScalars::fixed([0.0, 0.0, 0.0, 1.0]))
                } else {
                    mask::transform_weights(w, &m, &l.scalars)
                }
            })
            .collect()
    }
}

impl Parameters for DomainParams {
    fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::Mask(i) => match &self.layers.get(i)?.mask {
                MaskState::Real(r) => Some(&r.values),
                MaskState::Binary(_) => None,
            },
            ParamId::K { layer, index } => self.layers.get(layer)?.scalars.k.get(index)?.learned(),
            ParamId::BnGamma(j) => self.bn.get(j).map(|b| &b.gamma),
            ParamId::BnBeta(j) => self.bn.get(j).map(|b| &b.beta),
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
            ParamId::Weight(_) => None,
        }
    }

    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::Mask(i) => match &mut self.layers.get_mut(i)?.mask {
                MaskState::Real(r) => Some(&mut r.values),
                MaskState::Binary(_) => None,
            },
            ParamId::K { layer, index } => match self.layers.get_mut(layer)?.scalars.k.get_mut(index)? {
                Scalar::Learned(t) => Some(t),
                Scalar::Fixed(_) => None,
            },
            ParamId::BnGamma(j) => self.bn.get_mut(j).map(|b| &mut b.gamma),
            ParamId::BnBeta(j) => self.bn.get_mut(j).map(|b| &mut b.beta),
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
            ParamId::Weight(_) => None,
        }
    }
}

/// A domain network `f_i`: the shared backbone viewed through one domain's
/// parameters.
pub struct DomainNet<'a> {
    backbone: &'a Backbone,
    domain: &'a mut DomainParams,
    pub mode: Mode,
}

impl<'a> DomainNet<'a> {
    pub fn new(backbone: &'a Backbone, domain: &'a mut DomainParams, mode: Mode) -> Result<Self> {
        domain.validate(backbone)?;
        Ok(DomainNet { backbone, domain, mode })
    }

    pub fn backbone(&self) -> &Backbone {
        self.backbone
    }

    pub fn domain(&self) -> &DomainParams {
        self.domain
    }

    pub fn domain_mut(&mut self) -> &mut DomainParams {
        self.domain
    }

    /// Logits `[N, |Y_i|]`. In train mode batch norms use batch statistics and
    /// update the domain's running statistics.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.backbone.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (rec, _) = self.domain.record(&mut tape, self.backbone, xv, self.mode, Trainable::NONE)?;
        if self.mode == Mode::Train {
            self.domain.update_running(&rec);
        }
        Ok(tape.value(rec.logits).clone())
    }
}
