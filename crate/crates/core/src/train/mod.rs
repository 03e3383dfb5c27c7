//! Optimizers, schedules and the per-domain training loop.

mod optim;

pub use optim::{OptimKind, OptimizerState};

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Tape;
use crate::data::{flip_horizontal, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::mask::Scalar;
use crate::net::{BaseModel, Backbone, Classifier, DomainParams, MaskState, Mode, ParamId, Trainable};
use crate::rng;
use crate::tensor::Tensor;

/// Step decay of both learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f32,
}

impl Schedule {
    pub const DESK: Schedule = Schedule { epochs: 30, decay_epoch: 20, decay_factor: 10.0 };
    pub const BENCH1: Schedule = Schedule { epochs: 15, decay_epoch: 10, decay_factor: 10.0 };
    pub const DECATHLON: Schedule = Schedule { epochs: 60, decay_epoch: 45, decay_factor: 10.0 };

    pub fn new(epochs: usize, decay_epoch: usize, decay_factor: f32) -> Result<Self> {
        let s = Schedule { epochs, decay_epoch, decay_factor };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_epoch > self.epochs {
            return Err(Error::Config(format!(
                "decay epoch {} is past the last epoch {}",
                self.decay_epoch, self.epochs
            )));
        }
        if !(self.decay_factor > 1.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!("decay factor must exceed 1, got {}", self.decay_factor)));
        }
        Ok(())
    }

    /// `desk` (30/20), `bench1` (15/10) or `decathlon` (60/45).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::DESK),
            "bench1" => Some(Self::BENCH1),
            "decathlon" => Some(Self::DECATHLON),
            _ => None,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, base: f32, epoch: usize) -> f32 {
        if epoch >= self.decay_epoch {
            base / self.decay_factor
        } else {
            base
        }
    }
}

/// What a domain trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Protocol {
    /// Masks, learned scalars, batch norm and classifier.
    #[default]
    Masks,
    /// The classifier alone on top of the frozen network (batch norm in eval mode).
    ClassifierOnly,
}

impl Protocol {
    pub fn trainable(self) -> Trainable {
        match self {
            Protocol::Masks => Trainable::ALL,
            Protocol::ClassifierOnly => Trainable::HEAD_ONLY,
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Protocol::Masks => Mode::Train,
            Protocol::ClassifierOnly => Mode::Eval,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Masks => "masks",
            Protocol::ClassifierOnly => "classifier-only",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masks" => Ok(Protocol::Masks),
            "classifier-only" | "classifier" => Ok(Protocol::ClassifierOnly),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (expected masks or classifier-only)"))),
        }
    }
}

/// Hyperparameters of a domain training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Adam group: masks, learned scalars, batch norm.
    pub adam_lr: f32,
    /// SGD-with-momentum group: classifier.
    pub sgd_lr: f32,
    pub protocol: Protocol,
    /// Random horizontal flips of training images.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::DESK,
            batch_size: 32,
            adam_lr: 1e-4,
            sgd_lr: 1e-3,
            protocol: Protocol::Masks,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for (name, lr) in [("adam", self.adam_lr), ("sgd", self.sgd_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Partition of a domain's trainable tensors by optimizer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamGroups {
    /// Adam: real masks, learned scalars, batch-norm scale and shift.
    pub adam: Vec<ParamId>,
    /// SGD with momentum: classifier weight and bias.
    pub sgd: Vec<ParamId>,
}

impl ParamGroups {
    pub fn all(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.adam.iter().chain(&self.sgd).copied()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.all().any(|p| p == id)
    }
}

pub fn make_groups(domain: &DomainParams, protocol: Protocol) -> ParamGroups {
    let mut groups = ParamGroups { adam: Vec::new(), sgd: vec![ParamId::HeadWeight, ParamId::HeadBias] };
    if protocol == Protocol::ClassifierOnly {
        return groups;
    }
    for (i, layer) in domain.layers.iter().enumerate() {
        if matches!(layer.mask, MaskState::Real(_)) {
            groups.adam.push(ParamId::Mask(i));
        }
        if !domain.config.is_piggyback() {
            for (index, k) in layer.scalars.k.iter().enumerate() {
                if matches!(k, Scalar::Learned(_)) {
                    groups.adam.push(ParamId::K { layer: i, index });
                }
            }
        }
    }
    for j in 0..domain.bn.len() {
        groups.adam.push(ParamId::BnGamma(j));
        groups.adam.push(ParamId::BnBeta(j));
    }
    groups
}

/// Loss, logits and parameter gradients of one recorded pass.
#[derive(Debug)]
pub struct Evaluation {
    pub loss: f32,
    pub logits: Tensor,
    pub grads: Vec<(ParamId, Tensor)>,
}

/// Mean cross-entropy of `domain` on a batch and its gradients for every
/// parameter trainable under `protocol`. Running statistics are not touched.
pub fn domain_gradients(
    backbone: &Backbone,
    domain: &DomainParams,
    x: &Tensor,
    labels: &[usize],
    protocol: Protocol,
) -> Result<Evaluation> {
    Ok(domain_pass(backbone, domain, x, labels, protocol)?.0)
}

fn domain_pass(
    backbone: &Backbone,
    domain: &DomainParams,
    x: &Tensor,
    labels: &[usize],
    protocol: Protocol,
) -> Result<(Evaluation, crate::net::Recorded)> {
    backbone.check_input(x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (rec, binding) = domain.record(&mut tape, backbone, xv, protocol.mode(), protocol.trainable())?;
    let loss = tape.softmax_cross_entropy(rec.logits, labels)?;
    let grads = tape.backward(loss)?;
    let grads = binding
        .params
        .iter()
        .map(|&(id, v)| (id, grads.get_or_zeros(v, tape.value(v))))
        .collect();
    let eval = Evaluation { loss: tape.value(loss).item()?, logits: tape.value(rec.logits).clone(), grads };
    Ok((eval, rec))
}

/// Optimizer state of one domain's training run.
#[derive(Clone, Debug)]
pub struct DomainTrainer {
    pub groups: ParamGroups,
    pub adam: OptimizerState,
    pub sgd: OptimizerState,
    config: TrainConfig,
    steps: usize,
}

impl DomainTrainer {
    pub fn new(domain: &DomainParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(DomainTrainer {
            groups: make_groups(domain, config.protocol),
            adam: OptimizerState::new(OptimKind::ADAM, config.adam_lr)?,
            sgd: OptimizerState::new(OptimKind::SGD_MOMENTUM, config.sgd_lr)?,
            config,
            steps: 0,
        })
    }

    /// Sets both learning rates for `epoch`.
    pub fn start_epoch(&mut self, epoch: usize) -> Result<()> {
        let s = self.config.schedule;
        self.adam.set_lr(s.lr_at(self.config.adam_lr, epoch))?;
        self.sgd.set_lr(s.lr_at(self.config.sgd_lr, epoch))
    }

    /// One optimization step on a batch; returns the loss before the update
    /// and the number of correct predictions.
    pub fn step(&mut self, backbone: &Backbone, domain: &mut DomainParams, x: &Tensor, labels: &[usize]) -> Result<(f32, usize)> {
        let step = self.steps;
        self.steps += 1;
        let (eval, rec) = domain_pass(backbone, domain, x, labels, self.config.protocol)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite { what: format!("loss ({})", eval.loss), step });
        }
        optim::check_finite(&eval.grads, step)?;
        let (adam, sgd): (Vec<_>, Vec<_>) = eval.grads.into_iter().partition(|(id, _)| !id.is_head());
        debug_assert!(adam.iter().all(|(id, _)| self.groups.adam.contains(id)));
        self.adam.step(domain, &adam, step)?;
        self.sgd.step(domain, &sgd, step)?;
        if self.config.protocol.mode() == Mode::Train {
            domain.update_running(&rec);
        }
        Ok((eval.loss, correct(&eval.logits, labels)?))
    }
}

fn correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(logits.argmax_rows()?.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Statistics of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f32,
    /// Training accuracy of the predictions made during the epoch.
    pub accuracy: f32,
    /// Learning rates in effect (Adam or base, SGD).
    pub lr: [f32; 2],
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Top-1 accuracy on the test split after training.
    pub test_accuracy: f32,
    pub wall_time: Duration,
}

impl TrainReport {
    /// Equality ignoring wall time.
    pub fn same_results(&self, other: &TrainReport) -> bool {
        self.epochs == other.epochs && self.test_accuracy.to_bits() == other.test_accuracy.to_bits()
    }

    pub fn final_train_accuracy(&self) -> Option<f32> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

/// Receives each epoch's statistics as soon as it finishes.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochStats);

trait Learner {
    fn start_epoch(&mut self, epoch: usize) -> Result<[f32; 2]>;
    fn step(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f32, usize)>;
}

fn run_epochs(
    learner: &mut dyn Learner,
    train: &Split,
    schedule: Schedule,
    batch_size: usize,
    flip: bool,
    seed: u64,
    observer: EpochObserver<'_>,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() && schedule.epochs > 0 {
        return Err(Error::Empty("training split"));
    }
    let mut order_rng = rng::stream(seed, 10);
    let mut flip_rng = rng::stream(seed, 11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stats = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = learner.start_epoch(epoch)?;
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits, mut batches) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(batch_size) {
            let (mut x, labels) = train.batch(chunk);
            if flip {
                let px = train.height * train.width;
                for img in x.data_mut().chunks_exact_mut(px) {
                    if flip_rng.random_bool(0.5) {
                        flip_horizontal(img, train.width);
                    }
                }
            }
            let (loss, c) = learner.step(&x, &labels)?;
            loss_sum += loss as f64;
            hits += c;
            batches += 1;
        }
        let s = EpochStats {
            epoch,
            loss: (loss_sum / batches as f64) as f32,
            accuracy: hits as f32 / train.len() as f32,
            lr,
        };
        observer(&s);
        stats.push(s);
    }
    Ok(stats)
}

const EVAL_BATCH: usize = 256;

/// Eval-mode top-1 accuracy of a domain on a split.
pub fn evaluate_domain(backbone: &Backbone, domain: &DomainParams, split: &Split) -> Result<f32> {
    evaluate_with(split, |x| domain.predict(backbone, x))
}

/// Eval-mode top-1 accuracy of a base model on a split.
pub fn evaluate_base(model: &BaseModel, split: &Split) -> Result<f32> {
    evaluate_with(split, |x| model.predict(x))
}

fn evaluate_with(split: &Split, mut predict: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f32> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = split.batch(chunk);
        hits += correct(&predict(&x)?, &labels)?;
    }
    Ok(hits as f32 / split.len() as f32)
}

struct DomainLearner<'a> {
    trainer: DomainTrainer,
    backbone: &'a Backbone,
    domain: &'a mut DomainParams,
}

impl Learner for DomainLearner<'_> {
    fn start_epoch(&mut self, epoch: usize) -> Result<[f32; 2]> {
        self.trainer.start_epoch(epoch)?;
        Ok([self.trainer.adam.lr(), self.trainer.sgd.lr()])
    }

    fn step(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f32, usize)> {
        self.trainer.step(self.backbone, self.domain, x, labels)
    }
}

/// Trains one domain on top of a frozen backbone.
pub fn train_domain(
    backbone: &Backbone,
    domain: &mut DomainParams,
    data: &DomainDataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    train_domain_observed(backbone, domain, data, config, seed, &mut |_| {})
}

pub fn train_domain_observed(
    backbone: &Backbone,
    domain: &mut DomainParams,
    data: &DomainDataset,
    config: &TrainConfig,
    seed: u64,
    observer: EpochObserver<'_>,
) -> Result<TrainReport> {
    let start = Instant::now();
    domain.validate(backbone)?;
    if data.num_classes != domain.num_classes() {
        return Err(Error::ClassMismatch { domain: domain.num_classes(), dataset: data.num_classes });
    }
    let trainer = DomainTrainer::new(domain, *config)?;
    let mut learner = DomainLearner { trainer, backbone, domain };
    let epochs = run_epochs(&mut learner, &data.train, config.schedule, config.batch_size, config.flip, seed, observer)?;
    let test_accuracy = evaluate_domain(backbone, learner.domain, &data.test)?;
    Ok(TrainReport { epochs, test_accuracy, wall_time: start.elapsed() })
}

/// Hyperparameters for training a whole network (pretraining or finetuning).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Adam learning rate for every parameter.
    pub lr: f32,
    pub flip: bool,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig { schedule: Schedule::DESK, batch_size: 32, lr: 1e-3, flip: false }
    }
}

struct BaseLearner<'a> {
    model: &'a mut BaseModel,
    opt: OptimizerState,
    config: BaseConfig,
    steps: usize,
}

impl Learner for BaseLearner<'_> {
    fn start_epoch(&mut self, epoch: usize) -> Result<[f32; 2]> {
        let lr = self.config.schedule.lr_at(self.config.lr, epoch);
        self.opt.set_lr(lr)?;
        Ok([lr, lr])
    }

    fn step(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f32, usize)> {
        let step = self.steps;
        self.steps += 1;
        self.model.backbone.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (rec, binding) = self.model.record(&mut tape, xv, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(rec.logits, labels)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite { what: format!("loss ({lv})"), step });
        }
        let g = tape.backward(loss)?;
        let grads: Vec<_> = binding.params.iter().map(|&(id, v)| (id, g.get_or_zeros(v, tape.value(v)))).collect();
        self.opt.step(self.model, &grads, step)?;
        self.model.update_running(&rec);
        Ok((lv, correct(tape.value(rec.logits), labels)?))
    }
}

/// Trains every parameter of `model` (backbone and classifier) with Adam.
pub fn train_base(model: &mut BaseModel, data: &DomainDataset, config: &BaseConfig, seed: u64) -> Result<TrainReport> {
    train_base_observed(model, data, config, seed, &mut |_| {})
}

pub fn train_base_observed(
    model: &mut BaseModel,
    data: &DomainDataset,
    config: &BaseConfig,
    seed: u64,
    observer: EpochObserver<'_>,
) -> Result<TrainReport> {
    let start = Instant::now();
    config.schedule.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::ClassMismatch { domain: model.num_classes(), dataset: data.num_classes });
    }
    let opt = OptimizerState::new(OptimKind::ADAM, config.lr)?;
    let mut learner = BaseLearner { model, opt, config: *config, steps: 0 };
    let epochs = run_epochs(&mut learner, &data.train, config.schedule, config.batch_size, config.flip, seed, observer)?;
    let test_accuracy = evaluate_base(learner.model, &data.test)?;
    Ok(TrainReport { epochs, test_accuracy, wall_time: start.elapsed() })
}

/// Finetunes a copy of `backbone` with a fresh classifier on one domain: the
/// per-domain upper baseline.
pub fn finetune(backbone: &Backbone, data: &DomainDataset, config: &BaseConfig, seed: u64) -> Result<(BaseModel, TrainReport)> {
    let head = Classifier::init(backbone.feature_dim(), data.num_classes, &mut rng::stream(seed, 1));
    let mut model = BaseModel { backbone: backbone.clone(), head };
    let report = train_base(&mut model, data, config, seed)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests;
