use crate::autograd::{BatchStats, RunningStats, Tape, Var, BN_EPS};
use crate::error::Result;

use super::arch::{LayerPlan, LayerSpec};
use super::ParamId;

/// Batch-norm inputs for one layer; `running == None` selects batch statistics.
pub(crate) struct BnBinding<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub running: Option<&'a RunningStats>,
}

/// Outputs of a recorded forward pass.
#[derive(Debug)]
pub struct Recorded {
    /// Flattened `[N, D]` features fed to the classifier.
    pub features: Var,
    pub logits: Var,
    /// Batch statistics of each batch-norm layer, when computed.
    pub batch_stats: Vec<Option<BatchStats>>,
}

/// Tape variables of every trainable tensor in a recorded pass.
#[derive(Debug, Default)]
pub struct Binding {
    pub params: Vec<(ParamId, Var)>,
    /// Per masked layer: the mask value fed to the transform.
    pub masks: Vec<Var>,
    /// Per masked layer: the weight used by the layer.
    pub weights: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }
}

pub(crate) fn record_network(
    tape: &mut Tape,
    plan: &[LayerPlan],
    weights: &[Var],
    bn: &[BnBinding<'_>],
    head: (Var, Var),
    x: Var,
) -> Result<Recorded> {
    let mut h = x;
    let mut batch_stats = Vec::with_capacity(bn.len());
    for layer in plan {
        h = match layer.spec {
            LayerSpec::Conv { stride, pad, .. } => {
                let (idx, _) = layer.masked.as_ref().expect("conv is masked");
                tape.conv2d(h, weights[*idx], stride, pad)?
            }
            LayerSpec::Dense { out } => {
                let (idx, _) = layer.masked.as_ref().expect("dense is masked");
                let flat = tape.flatten(h)?;
                let zero = tape.constant(crate::Tensor::zeros(&[out]));
                tape.dense(flat, weights[*idx], zero)?
            }
            LayerSpec::BatchNorm => {
                let (_, idx) = layer.bn.expect("bn index");
                let b = &bn[idx];
                match b.running {
                    Some(running) => {
                        batch_stats.push(None);
                        tape.batch_norm_eval(h, b.gamma, b.beta, running, BN_EPS)?
                    }
                    None => {
                        let (y, stats) = tape.batch_norm_train(h, b.gamma, b.beta, BN_EPS)?;
                        batch_stats.push(Some(stats));
                        y
                    }
                }
            }
            LayerSpec::Relu => tape.relu(h),
            LayerSpec::MaxPool { size } => tape.max_pool2d(h, size)?,
        };
    }
    let features = tape.flatten(h)?;
    let logits = tape.dense(features, head.0, head.1)?;
    Ok(Recorded { features, logits, batch_stats })
}
