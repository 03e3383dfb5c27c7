//! Double-precision reference implementation of a masked domain network,
//! written independently of the library's kernels.

#![allow(dead_code)]

use mdmask::mask::Scalar;
use mdmask::net::{Backbone, DomainParams, LayerSpec};
use mdmask::Tensor;

pub fn to_f64(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

/// The domain's parameters in f64.
#[derive(Clone, Debug)]
pub struct RefDomain {
    pub weights: Vec<Vec<f64>>,
    pub weight_shapes: Vec<Vec<usize>>,
    pub masks: Vec<Vec<f64>>,
    /// Per masked layer, `k0..k3`; one value per layer or per output channel.
    pub k: Vec<[Vec<f64>; 4]>,
    pub piggyback: bool,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub input: [usize; 3],
}

impl RefDomain {
    pub fn new(backbone: &Backbone, domain: &DomainParams) -> Self {
        let k = domain
            .layers
            .iter()
            .map(|l| {
                l.scalars.k.clone().map(|s| match s {
                    Scalar::Fixed(v) => vec![v as f64],
                    Scalar::Learned(t) => to_f64(t.data()),
                })
            })
            .collect();
        RefDomain {
            weights: backbone.weights().iter().map(|w| to_f64(w.data())).collect(),
            weight_shapes: backbone.weights().iter().map(|w| w.shape().to_vec()).collect(),
            masks: domain.binary_masks().iter().map(|m| m.bits().iter().map(|&b| b as u8 as f64).collect()).collect(),
            k,
            piggyback: domain.config.is_piggyback(),
            gamma: domain.bn.iter().map(|b| to_f64(b.gamma.data())).collect(),
            beta: domain.bn.iter().map(|b| to_f64(b.beta.data())).collect(),
            head_w: to_f64(domain.head.weight.data()),
            head_b: to_f64(domain.head.bias.data()),
            num_classes: domain.num_classes(),
            layers: backbone.arch().layers.clone(),
            input: backbone.arch().input,
        }
    }

    /// `k0·W + k1 + k2·M + k3·(W∘M)` elementwise, or `W∘M` for the dedicated path.
    pub fn transformed(&self, layer: usize) -> Vec<f64> {
        let w = &self.weights[layer];
        let m = &self.masks[layer];
        let cout = self.weight_shapes[layer][0];
        let per = w.len() / cout;
        (0..w.len())
            .map(|i| {
                if self.piggyback {
                    return w[i] * m[i];
                }
                let c = i / per;
                let k = |j: usize| {
                    let v = &self.k[layer][j];
                    if v.len() == 1 { v[0] } else { v[c] }
                };
                k(0) * w[i] + k(1) + k(2) * m[i] + k(3) * w[i] * m[i]
            })
            .collect()
    }

    /// Mean cross-entropy in train mode (batch statistics, biased variance).
    pub fn loss(&self, x: &Tensor, labels: &[usize], eps: f64) -> f64 {
        self.loss_gated(x, labels, eps, None).0
    }

    /// Loss with ReLU and max-pool routing either recorded or replayed from `gates`.
    /// Replaying keeps the network on one linear piece, so finite differences see no kinks.
    pub fn loss_gated(&self, x: &Tensor, labels: &[usize], eps: f64, gates: Option<&Gates>) -> (f64, Gates) {
        let (logits, gates) = self.logits_gated(x, eps, gates);
        let k = self.num_classes;
        let n = labels.len();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        (total / n as f64, gates)
    }

    pub fn logits(&self, x: &Tensor, eps: f64) -> Vec<f64> {
        self.logits_gated(x, eps, None).0
    }

    pub fn logits_gated(&self, x: &Tensor, eps: f64, replay: Option<&Gates>) -> (Vec<f64>, Gates) {
        let mut gates = Gates::default();
        let n = x.shape()[0];
        let [mut c, mut h, mut w] = self.input;
        let mut a = to_f64(x.data());
        let (mut masked, mut bn) = (0, 0);
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let wt = self.transformed(masked);
                    masked += 1;
                    let oh = (h + 2 * pad - kernel) / stride + 1;
                    let ow = (w + 2 * pad - kernel) / stride + 1;
                    a = conv(&a, n, c, h, w, &wt, out_channels, kernel, stride, pad);
                    c = out_channels;
                    h = oh;
                    w = ow;
                }
                LayerSpec::BatchNorm => {
                    a = batch_norm(&a, n, c, h * w, &self.gamma[bn], &self.beta[bn], eps);
                    bn += 1;
                }
                LayerSpec::Relu => {
                    let on: Vec<bool> = match replay {
                        Some(g) => g.relu[gates.relu.len()].clone(),
                        None => a.iter().map(|&v| v > 0.0).collect(),
                    };
                    a.iter_mut().zip(&on).for_each(|(v, &keep)| if !keep { *v = 0.0 });
                    gates.relu.push(on);
                }
                LayerSpec::MaxPool { size } => {
                    let route = match replay {
                        Some(g) => g.pool[gates.pool.len()].clone(),
                        None => pool_argmax(&a, n, c, h, w, size),
                    };
                    a = route.iter().map(|&i| a[i]).collect();
                    gates.pool.push(route);
                    h /= size;
                    w /= size;
                }
                LayerSpec::Dense { out } => {
                    let wt = self.transformed(masked);
                    masked += 1;
                    a = dense(&a, n, c * h * w, &wt, &vec![0.0; out], out);
                    c = out;
                    h = 1;
                    w = 1;
                }
            }
        }
        (dense(&a, n, c * h * w, &self.head_w, &self.head_b, self.num_classes), gates)
    }
}

/// Activation routing of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Gates {
    pub relu: Vec<Vec<bool>>,
    pub pool: Vec<Vec<usize>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                s += x[((b * c + ci) * h + y as usize) * w + xx as usize] * wt[((o * c + ci) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    out
}

pub fn batch_norm(x: &[f64], n: usize, c: usize, hw: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let count = (n * hw) as f64;
    for ch in 0..c {
        let idx = |b: usize, s: usize| (b * c + ch) * hw + s;
        let mut mean = 0.0;
        for b in 0..n {
            for s in 0..hw {
                mean += x[idx(b, s)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..n {
            for s in 0..hw {
                var += (x[idx(b, s)] - mean).powi(2);
            }
        }
        var /= count;
        let inv = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for s in 0..hw {
                out[idx(b, s)] = gamma[ch] * (x[idx(b, s)] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

pub fn max_pool(x: &[f64], n: usize, c: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
    for bc in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let o = &mut out[(bc * oh + i) * ow + j];
                for di in 0..size {
                    for dj in 0..size {
                        *o = o.max(x[(bc * h + i * size + di) * w + j * size + dj]);
                    }
                }
            }
        }
    }
    out
}

/// Flat input index of each pooling window's maximum (first on ties).
pub fn pool_argmax(x: &[f64], n: usize, c: usize, h: usize, w: usize, size: usize) -> Vec<usize> {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for bc in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (bc * h + i * size) * w + j * size;
                for di in 0..size {
                    for dj in 0..size {
                        let k = (bc * h + i * size + di) * w + j * size + dj;
                        if x[k] > x[best] {
                            best = k;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

pub fn dense(x: &[f64], n: usize, d: usize, wt: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        for o in 0..out {
            y[i * out + o] = b[o] + (0..d).map(|j| x[i * d + j] * wt[o * d + j]).sum::<f64>();
        }
    }
    y
}
