//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its forward value; node indices are
//! therefore a topological order and [`Tape::backward`] walks them in reverse,
//! visiting each node once and summing gradients over all uses of a value.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::BatchStats;
use kernels::{ChannelLayout, ConvGeom};

/// Batch-norm epsilon used throughout the crate.
pub const BN_EPS: f32 = 1e-5;
/// Running-statistics momentum used throughout the crate.
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, f32),
    /// `x * k` with `k` a scalar or one value per leading-axis slice of `x`.
    ScaleChannels { x: Var, k: Var },
    /// `k` broadcast to the node shape along the leading axis.
    BroadcastChannels(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_statistics: bool,
        layout: ChannelLayout,
    },
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    /// Elementwise op whose backward pass multiplies by a stored factor.
    Custom { x: Var, multiplier: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Exponential moving average update. The stored variance is the unbiased
    /// estimate `var * n / (n - 1)`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f32) {
        let correction = if batch.count > 1 {
            batch.count as f32 / (batch.count - 1) as f32
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// require a gradient or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// A recording of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn mul_const(&mut self, x: Var, c: f32) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::MulConst(x, c), rg)
    }

    /// Number of values each entry of `k` covers when broadcast over `shape`.
    fn channel_span(shape: &[usize], k: &Tensor) -> Result<usize> {
        let numel: usize = shape.iter().product();
        match k.numel() {
            1 => Ok(numel),
            n if shape.first() == Some(&n) => Ok(numel / n),
            _ => Err(Error::dim(format!(
                "channel scalar of shape {:?} does not broadcast over {shape:?}",
                k.shape()
            ))),
        }
    }

    /// `x * k`, where `k` holds one value or one value per leading-axis slice.
    pub fn scale_channels(&mut self, x: Var, k: Var) -> Result<Var> {
        let span = Self::channel_span(self.shape(x), self.value(k))?;
        let kd = self.value(k).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v * kd[i / span]).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(value, Op::ScaleChannels { x, k }, rg))
    }

    /// Broadcasts a scalar or per-channel `k` to `shape`.
    pub fn broadcast_channels(&mut self, k: Var, shape: &[usize]) -> Result<Var> {
        let span = Self::channel_span(shape, self.value(k))?;
        let kd = self.value(k).data();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| kd[i / span]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[k]);
        Ok(self.push(value, Op::BroadcastChannels(k), rg))
    }

    /// Bias-free 2-D cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,Kh,Kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (&[n, cin, h, wd], &[cout, wcin, kh, kw]) = (self.shape(x), self.shape(w)) else {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                self.shape(x),
                self.shape(w)
            )));
        };
        if cin != wcin {
            return Err(Error::dim(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be at least 1"));
        }
        let out_h = ConvGeom::out_extent(h, kh, stride, pad);
        let out_w = ConvGeom::out_extent(wd, kw, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::dim(format!(
                "conv2d: {h}x{wd} input with {kh}x{kw} kernel, stride {stride}, pad {pad} has no integer output size"
            )));
        };
        let geom = ConvGeom {
            batch: n,
            in_channels: cin,
            in_h: h,
            in_w: wd,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(&[n, cout, out_h, out_w], data)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    fn channel_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<ChannelLayout> {
        let layout = match *self.shape(x) {
            [n, c] => ChannelLayout { batch: n, channels: c, spatial: 1 },
            [n, c, h, w] => ChannelLayout { batch: n, channels: c, spatial: h * w },
            _ => return Err(Error::dim(format!("batch_norm expects rank 2 or 4, got {:?}", self.shape(x)))),
        };
        if layout.batch == 0 {
            return Err(Error::Empty("batch_norm on a zero-sized batch"));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [layout.channels] {
                return Err(Error::dim(format!(
                    "batch_norm parameter shape {:?}, expected [{}]",
                    self.shape(p),
                    layout.channels
                )));
            }
        }
        Ok(layout)
    }

    /// Batch norm normalizing with the statistics of `x` itself.
    /// Returns the output and the statistics used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let layout = self.channel_layout(x, gamma, beta)?;
        let stats = kernels::batch_stats(self.value(x).data(), &layout);
        let (y, xhat, inv_std) = kernels::batch_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &stats.mean,
            &stats.var,
            eps,
            &layout,
        );
        let value = Tensor::new(self.shape(x), y)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_statistics: true, layout };
        Ok((self.push(value, op, rg), stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        eps: f32,
    ) -> Result<Var> {
        let layout = self.channel_layout(x, gamma, beta)?;
        if stats.mean.len() != layout.channels || stats.var.len() != layout.channels {
            return Err(Error::dim("batch_norm running statistics do not match channel count"));
        }
        let (y, xhat, inv_std) = kernels::batch_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &stats.mean,
            &stats.var,
            eps,
            &layout,
        );
        let value = Tensor::new(self.shape(x), y)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_statistics: false, layout };
        Ok(self.push(value, op, rg))
    }

    /// Batch norm that, in training mode, normalizes with batch statistics
    /// and folds them into `running` with the given momentum; in eval mode it
    /// normalizes with `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        training: bool,
        eps: f32,
        momentum: f32,
    ) -> Result<Var> {
        if training {
            let (y, stats) = self.batch_norm_train(x, gamma, beta, eps)?;
            running.update(&stats, momentum);
            Ok(y)
        } else {
            self.batch_norm_eval(x, gamma, beta, running, eps)
        }
    }

    /// `x · wᵀ + b` for `x: [N,Din]`, `w: [Dout,Din]`, `b: [Dout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (&[n, din], &[dout, wdin]) = (self.shape(x), self.shape(w)) else {
            return Err(Error::dim(format!(
                "dense expects [N,Din] and [Dout,Din], got {:?} and {:?}",
                self.shape(x),
                self.shape(w)
            )));
        };
        if din != wdin || self.shape(b) != [dout] {
            return Err(Error::dim(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * dout);
        for row in xd.chunks_exact(din) {
            for (o, wrow) in wd.chunks_exact(din).enumerate() {
                let dot: f32 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out.push(dot + bd[o]);
            }
        }
        let value = Tensor::new(&[n, dout], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Non-overlapping `size × size` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(Error::dim(format!("max_pool2d expects rank 4, got {:?}", self.shape(x))));
        };
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::dim(format!("max_pool2d: {h}x{w} not divisible by {size}")));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), n * c, h, w, size);
        let value = Tensor::new(&[n, c, h / size, w / size], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.first().ok_or_else(|| Error::dim("flatten of a scalar"))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(Error::dim(format!("cross entropy expects [N,K] logits, got {:?}", self.shape(logits))));
        };
        if n == 0 {
            return Err(Error::Empty("cross entropy over an empty batch"));
        }
        if labels.len() != n {
            return Err(Error::dim(format!("{n} logit rows but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, num_classes: k });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits).data(), labels, k);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, labels: labels.to_vec() },
            rg,
        ))
    }

    /// Elementwise op with a user-defined derivative.
    ///
    /// The forward value is exactly `forward(x)`; the backward pass multiplies
    /// the incoming gradient by `backward_scale(x)` elementwise.
    pub fn custom_grad(
        &mut self,
        x: Var,
        forward: impl Fn(f32) -> f32,
        backward_scale: impl Fn(f32) -> f32,
    ) -> Var {
        let input = self.value(x);
        let value = input.map(&forward);
        let multiplier = input.data().iter().map(|&v| backward_scale(v)).collect();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Custom { x, multiplier }, rg)
    }

    /// Computes gradients of the scalar `loss` with respect to every recorded
    /// value that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape matches value"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: impl FnOnce() -> Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let d = delta();
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(d),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.to_vec());
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, || g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, || g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::MulConst(x, c) => self.accumulate(grads, *x, || g.iter().map(|g| g * c).collect()),
            Op::ScaleChannels { x, k } => {
                let kd = val(*k);
                let span = g.len() / kd.len();
                self.accumulate(grads, *x, || g.iter().enumerate().map(|(i, g)| g * kd[i / span]).collect());
                self.accumulate(grads, *k, || {
                    let xd = val(*x);
                    let mut gk = vec![0.0f32; kd.len()];
                    for (i, (g, x)) in g.iter().zip(xd).enumerate() {
                        gk[i / span] += g * x;
                    }
                    gk
                });
            }
            Op::BroadcastChannels(k) => {
                let kn = self.nodes[k.0].value.numel();
                let span = g.len() / kn;
                self.accumulate(grads, *k, || {
                    let mut gk = vec![0.0f32; kn];
                    for (i, g) in g.iter().enumerate() {
                        gk[i / span] += g;
                    }
                    gk
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), g, geom, rg(*x), rg(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, || gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, || gw);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_statistics, layout } => {
                let (gx, ggamma, gbeta) =
                    kernels::batch_norm_backward(g, xhat, val(*gamma), inv_std, *batch_statistics, layout);
                self.accumulate(grads, *x, || gx);
                self.accumulate(grads, *gamma, || ggamma);
                self.accumulate(grads, *beta, || gbeta);
            }
            Op::Dense { x, w, b } => {
                let (xd, wd) = (val(*x), val(*w));
                let dout = self.nodes[b.0].value.numel();
                let din = wd.len() / dout;
                self.accumulate(grads, *x, || {
                    let mut gx = vec![0.0f32; xd.len()];
                    for (grow, gxrow) in g.chunks_exact(dout).zip(gx.chunks_exact_mut(din)) {
                        for (o, &gv) in grow.iter().enumerate() {
                            for (gxi, wv) in gxrow.iter_mut().zip(&wd[o * din..(o + 1) * din]) {
                                *gxi += gv * wv;
                            }
                        }
                    }
                    gx
                });
                self.accumulate(grads, *w, || {
                    let mut gw = vec![0.0f32; wd.len()];
                    for (grow, xrow) in g.chunks_exact(dout).zip(xd.chunks_exact(din)) {
                        for (o, &gv) in grow.iter().enumerate() {
                            for (gwi, xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xrow) {
                                *gwi += gv * xv;
                            }
                        }
                    }
                    gw
                });
                self.accumulate(grads, *b, || {
                    let mut gb = vec![0.0f32; dout];
                    for grow in g.chunks_exact(dout) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, || {
                    g.iter().zip(val(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()
                });
            }
            Op::MaxPool { x, argmax } => {
                self.accumulate(grads, *x, || {
                    let mut gx = vec![0.0f32; val(*x).len()];
                    for (g, &i) in g.iter().zip(argmax) {
                        gx[i] += g;
                    }
                    gx
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, || g.to_vec()),
            Op::Sum(x) => self.accumulate(grads, *x, || vec![g[0]; val(*x).len()]),
            Op::CrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f32;
                self.accumulate(grads, *logits, || {
                    let mut gl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * k + l] -= scale;
                    }
                    gl
                });
            }
            Op::Custom { x, multiplier } => {
                self.accumulate(grads, *x, || g.iter().zip(multiplier).map(|(g, m)| g * m).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::ones(&[1, 1, 3, 3]));
    }

    #[test]
    fn conv_zero_kernel_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 4, 4], &(0..32).map(|v| v as f32).collect::<Vec<_>>()));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[1, 3, 4, 4]));
    }

    #[test]
    fn conv_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(Error::Dimension(_))));
        let w = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(tape.conv2d(x, w, 2, 0), Err(Error::Dimension(_))));
        assert!(matches!(tape.conv2d(x, w, 0, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_norm_two_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[2.0, 4.0]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        assert_eq!(stats.mean, vec![3.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_zero_scale_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 1, 2], &[1.0, -3.0, 0.5, 7.0, 2.0, 2.0, -1.0, 4.0]));
        let g = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::from_slice(&[0.25, -2.0]));
        let (y, _) = tape.batch_norm_train(x, g, b, BN_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.25, -2.0, -2.0, 0.25, 0.25, -2.0, -2.0]);
    }

    #[test]
    fn batch_norm_normalized_input_is_fixed_point() {
        // Per-channel mean 0, population variance 1.
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 1], &[1.0, -1.0, 1.0, -1.0]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-9).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) <= 1e-5);
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[2.0, 4.0]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut running = RunningStats::new(1);
        tape.batch_norm(x, g, b, &mut running, true, BN_EPS, BN_MOMENTUM).unwrap();
        assert!((running.mean[0] - 0.3).abs() < 1e-7);
        // Unbiased batch variance is 2.
        assert!((running.var[0] - (0.9 + 0.2)).abs() < 1e-6);
        let snapshot = running.clone();
        let y = tape.batch_norm(x, g, b, &mut running, false, BN_EPS, BN_MOMENTUM).unwrap();
        assert_eq!(running, snapshot);
        let expected = (2.0 - 0.3) / (1.1f32 + BN_EPS).sqrt();
        assert!((tape.value(y).data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 3]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.batch_norm_train(x, g, b, BN_EPS), Err(Error::Empty(_))));
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::from_slice(&[0.0, 1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let xz = tape.constant(Tensor::zeros(&[3, 2]));
        let y = tape.dense(xz, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.dense(x, bad, b).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 5]));
        let l = tape.softmax_cross_entropy(uniform, &[0, 4]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f32.ln()).abs() < 1e-6);

        let sure = tape.constant(t(&[1, 3], &[0.0, 200.0, 0.0]));
        let l = tape.softmax_cross_entropy(sure, &[1]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let two = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = tape.softmax_cross_entropy(two, &[0]).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.3133).abs() < 1e-4);

        assert!(matches!(
            tape.softmax_cross_entropy(two, &[2]),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_slice(&[0.5, -1.0, 3.0]));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_slice(&[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn multi_use_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_slice(&[2.0]));
        let a = tape.add(w, w).unwrap();
        let b = tape.mul(a, w).unwrap();
        let s = tape.sum(b);
        // d/dw (2w * w) = 4w
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[8.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
        let w = tape.param(Tensor::from_slice(&[3.0, 4.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    fn step(v: f32) -> f32 {
        if v >= 0.0 { 1.0 } else { 0.0 }
    }

    #[test]
    fn custom_grad_straight_through() {
        let mut tape = Tape::new();
        let r = tape.param(Tensor::from_slice(&[-0.3, 0.0, 0.7]));
        let m = tape.custom_grad(r, step, |_| 1.0);
        assert_eq!(tape.value(m).data(), &[0.0, 1.0, 1.0]);
        let c = tape.constant(Tensor::from_slice(&[2.0, -1.0, 0.5]));
        let p = tape.mul(m, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[2.0, -1.0, 0.5]);
    }

    #[test]
    fn custom_grad_sigmoid_multiplier_and_zero_scale() {
        let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
        let mut tape = Tape::new();
        let r = tape.param(Tensor::from_slice(&[0.0]));
        let m = tape.custom_grad(r, step, |v| sig(v) * (1.0 - sig(v)));
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[0.25]);

        let mut tape = Tape::new();
        let r = tape.param(Tensor::from_slice(&[0.4, -2.0]));
        let m = tape.custom_grad(r, step, |_| 0.0);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn channel_scaling_broadcasts_over_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = tape.param(Tensor::from_slice(&[2.0, -1.0]));
        let y = tape.scale_channels(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(k).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);

        let bad = tape.param(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        assert!(tape.scale_channels(x, bad).is_err());
    }
}
