use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

use super::arch::{ArchSpec, LayerPlan};
use super::forward::{record_network, BnBinding, Binding, Recorded};
use super::{BnParams, Classifier, Mode, ParamId, Parameters};

/// Shared weights `Θ`: masked-layer weights and the pretrained batch norms.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    arch: ArchSpec,
    plan: Vec<LayerPlan>,
    weights: Vec<Tensor>,
    bn: Vec<BnParams>,
}

impl Backbone {
    /// Randomly initialized (He-normal) backbone.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<Self> {
        let plan = arch.plan()?;
        let mut rng = rng::stream(seed, 0);
        let mut weights = Vec::new();
        let mut bn = Vec::new();
        for layer in &plan {
            if let Some((_, shape)) = &layer.masked {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f32).sqrt();
                let n = shape.iter().product();
                weights.push(Tensor::new(shape, rng::normal_vec(&mut rng, n, std))?);
            }
            if let Some((channels, _)) = layer.bn {
                bn.push(BnParams::new(channels));
            }
        }
        Ok(Backbone { arch, plan, weights, bn })
    }

    /// Assembles a backbone from stored tensors, checking every shape.
    pub fn from_parts(arch: ArchSpec, weights: Vec<Tensor>, bn: Vec<BnParams>) -> Result<Self> {
        let plan = arch.plan()?;
        let shapes: Vec<&Vec<usize>> = plan.iter().filter_map(|l| l.masked.as_ref().map(|(_, s)| s)).collect();
        let channels: Vec<usize> = plan.iter().filter_map(|l| l.bn.map(|(c, _)| c)).collect();
        if shapes.len() != weights.len() || channels.len() != bn.len() {
            return Err(Error::Arch("layer count does not match stored tensors".into()));
        }
        for (s, w) in shapes.iter().zip(&weights) {
            if w.shape() != s.as_slice() {
                return Err(Error::dim(format!("stored weight {:?}, architecture needs {s:?}", w.shape())));
            }
        }
        for (c, b) in channels.iter().zip(&bn) {
            let ok = b.gamma.shape() == [*c]
                && b.beta.shape() == [*c]
                && b.running.mean.len() == *c
                && b.running.var.len() == *c;
            if !ok {
                return Err(Error::dim(format!("stored batch norm does not have {c} channels")));
            }
        }
        Ok(Backbone { arch, plan, weights, bn })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn plan(&self) -> &[LayerPlan] {
        &self.plan
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn bn(&self) -> &[BnParams] {
        &self.bn
    }

    /// Mutable access to a weight. Domain training only ever borrows the
    /// backbone immutably; this exists for pretraining and tamper tests.
    pub fn weight_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.weights[idx]
    }

    pub fn bn_mut(&mut self, idx: usize) -> &mut BnParams {
        &mut self.bn[idx]
    }

    pub fn feature_dim(&self) -> usize {
        self.plan.last().expect("non-empty plan").out_shape.iter().product()
    }

    /// Output channels of each masked layer.
    pub fn masked_out_channels(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.shape()[0]).collect()
    }

    /// Per masked layer: whether a batch norm follows it.
    pub fn masked_followed_by_bn(&self) -> Vec<bool> {
        self.plan.iter().filter(|l| l.masked.is_some()).map(|l| l.followed_by_bn).collect()
    }

    /// Number of maskable weights.
    pub fn masked_param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Trainable parameters excluding any classifier: weights plus batch-norm
    /// scale and shift.
    pub fn param_count(&self) -> usize {
        self.masked_param_count() + self.bn.iter().map(|b| 2 * b.channels()).sum::<usize>()
    }

    /// 64-bit content digest over the architecture text, weights and batch norms.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.arch.to_text().as_bytes());
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        let mut buf = Vec::new();
        for b in &self.bn {
            b.write_bytes(&mut buf);
        }
        h.update(&buf);
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, hh, w] = self.arch.input;
        match x.shape() {
            [n, xc, xh, xw] if *n > 0 && [*xc, *xh, *xw] == [c, hh, w] => Ok(()),
            other => Err(Error::dim(format!("input {other:?} does not match [N, {c}, {hh}, {w}]"))),
        }
    }

    /// Records this backbone with `head`. Weights, batch norm and head become
    /// trainable leaves when `trainable`.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        head: &Classifier,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Recorded, Binding)> {
        let leaf = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let mut binding = Binding::default();
        for (i, w) in self.weights.iter().enumerate() {
            let v = leaf(tape, w);
            binding.params.push((ParamId::Weight(i), v));
            binding.weights.push(v);
        }
        let mut bn = Vec::with_capacity(self.bn.len());
        for (j, b) in self.bn.iter().enumerate() {
            let gamma = leaf(tape, &b.gamma);
            let beta = leaf(tape, &b.beta);
            binding.params.push((ParamId::BnGamma(j), gamma));
            binding.params.push((ParamId::BnBeta(j), beta));
            let running = (mode == Mode::Eval).then_some(&b.running);
            bn.push(BnBinding { gamma, beta, running });
        }
        let hw = leaf(tape, &head.weight);
        let hb = leaf(tape, &head.bias);
        binding.params.push((ParamId::HeadWeight, hw));
        binding.params.push((ParamId::HeadBias, hb));
        if !trainable {
            binding.params.clear();
        }
        let rec = record_network(tape, &self.plan, &binding.weights, &bn, (hw, hb), x)?;
        Ok((rec, binding))
    }

    /// Eval-mode features `[N, D]` of the frozen backbone.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let dummy = Classifier { weight: Tensor::zeros(&[1, self.feature_dim()]), bias: Tensor::zeros(&[1]) };
        let (rec, _) = self.record(&mut tape, &dummy, xv, Mode::Eval, false)?;
        Ok(tape.value(rec.features).clone())
    }
}

/// A backbone together with the classifier it was pretrained with.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub backbone: Backbone,
    pub head: Classifier,
}

impl BaseModel {
    pub fn build(arch: ArchSpec, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let backbone = Backbone::build(arch, seed)?;
        let head = Classifier::init(backbone.feature_dim(), num_classes, &mut rng::stream(seed, 1));
        Ok(BaseModel { backbone, head })
    }

    /// All parameters including the classifier.
    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.head.param_count()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (rec, _) = self.backbone.record(&mut tape, &self.head, xv, Mode::Eval, false)?;
        Ok(tape.value(rec.logits).clone())
    }

    /// Records a forward pass with every parameter trainable.
    pub fn record(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Recorded, Binding)> {
        self.backbone.record(tape, &self.head, x, mode, true)
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn update_running(&mut self, rec: &Recorded) {
        for (b, stats) in self.backbone.bn.iter_mut().zip(&rec.batch_stats) {
            if let Some(stats) = stats {
                b.running.update(stats, BN_MOMENTUM);
            }
        }
    }
}

impl Parameters for BaseModel {
    fn param(&self, id: ParamId) -> Option<&Tensor> {
        let bb = &self.backbone;
        match id {
            ParamId::Weight(i) => bb.weights.get(i),
            ParamId::BnGamma(j) => bb.bn.get(j).map(|b| &b.gamma),
            ParamId::BnBeta(j) => bb.bn.get(j).map(|b| &b.beta),
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
            ParamId::Mask(_) | ParamId::K { .. } => None,
        }
    }

    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let bb = &mut self.backbone;
        match id {
            ParamId::Weight(i) => bb.weights.get_mut(i),
            ParamId::BnGamma(j) => bb.bn.get_mut(j).map(|b| &mut b.gamma),
            ParamId::BnBeta(j) => bb.bn.get_mut(j).map(|b| &mut b.beta),
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
            ParamId::Mask(_) | ParamId::K { .. } => None,
        }
    }
}
