//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! Loops run in a fixed order so that results are reproducible bit for bit.

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent along one axis, `None` if the window does not tile evenly.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    #[inline]
    fn src(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn conv2d_forward(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ohw, ihw) = (g.out_h * g.out_w, g.in_h * g.in_w);
    let mut out = vec![0.0f32; g.batch * g.out_channels * ohw];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let o = &mut out[(n * g.out_channels + co) * ohw..][..ohw];
            for ci in 0..g.in_channels {
                let xp = &x[(n * g.in_channels + ci) * ihw..][..ihw];
                for kh in 0..g.kernel_h {
                    for kw in 0..g.kernel_w {
                        let wv = w[((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw];
                        for oh in 0..g.out_h {
                            let Some(ih) = g.src(oh, kh, g.in_h) else { continue };
                            for ow in 0..g.out_w {
                                if let Some(iw) = g.src(ow, kw, g.in_w) {
                                    o[oh * g.out_w + ow] += wv * xp[ih * g.in_w + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`; either may be skipped.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (ohw, ihw) = (g.out_h * g.out_w, g.in_h * g.in_w);
    let mut gx = want_x.then(|| vec![0.0f32; x.len()]);
    let mut gw = want_w.then(|| vec![0.0f32; w.len()]);
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + co) * ohw..][..ohw];
            for ci in 0..g.in_channels {
                let base = (n * g.in_channels + ci) * ihw;
                let xp = &x[base..][..ihw];
                for kh in 0..g.kernel_h {
                    for kw in 0..g.kernel_w {
                        let widx = ((co * g.in_channels + ci) * g.kernel_h + kh) * g.kernel_w + kw;
                        let wv = w[widx];
                        let mut acc = 0.0f32;
                        for oh in 0..g.out_h {
                            let Some(ih) = g.src(oh, kh, g.in_h) else { continue };
                            for ow in 0..g.out_w {
                                if let Some(iw) = g.src(ow, kw, g.in_w) {
                                    let gv = go[oh * g.out_w + ow];
                                    acc += gv * xp[ih * g.in_w + iw];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[base + ih * g.in_w + iw] += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-channel normalization statistics of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f32>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Layout helper: `[N, C, S]` view of a rank-2 or rank-4 activation.
#[derive(Clone, Copy, Debug)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    fn for_each_channel_value(&self, c: usize, mut f: impl FnMut(usize)) {
        for n in 0..self.batch {
            let base = (n * self.channels + c) * self.spatial;
            for i in base..base + self.spatial {
                f(i);
            }
        }
    }
}

pub fn batch_stats(x: &[f32], l: &ChannelLayout) -> BatchStats {
    let count = l.batch * l.spatial;
    let mut mean = vec![0.0f32; l.channels];
    let mut var = vec![0.0f32; l.channels];
    for c in 0..l.channels {
        let mut s = 0.0f32;
        l.for_each_channel_value(c, |i| s += x[i]);
        let m = s / count as f32;
        let mut v = 0.0f32;
        l.for_each_channel_value(c, |i| {
            let d = x[i] - m;
            v += d * d;
        });
        mean[c] = m;
        var[c] = v / count as f32;
    }
    BatchStats { mean, var, count }
}

/// Normalizes with the given statistics; returns `(y, xhat, inv_std)`.
pub fn batch_norm_forward(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
    l: &ChannelLayout,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for c in 0..l.channels {
        l.for_each_channel_value(c, |i| {
            let h = (x[i] - mean[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        });
    }
    (y, xhat, inv_std)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
///
/// With `batch_statistics` the mean and variance are functions of `x` and
/// contribute to `grad_x`; otherwise they are constants.
pub fn batch_norm_backward(
    grad_out: &[f32],
    xhat: &[f32],
    gamma: &[f32],
    inv_std: &[f32],
    batch_statistics: bool,
    l: &ChannelLayout,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let count = (l.batch * l.spatial) as f32;
    let mut gx = vec![0.0f32; grad_out.len()];
    let mut ggamma = vec![0.0f32; l.channels];
    let mut gbeta = vec![0.0f32; l.channels];
    for c in 0..l.channels {
        let (mut sum_g, mut sum_gx) = (0.0f32, 0.0f32);
        l.for_each_channel_value(c, |i| {
            sum_g += grad_out[i];
            sum_gx += grad_out[i] * xhat[i];
        });
        ggamma[c] = sum_gx;
        gbeta[c] = sum_g;
        let scale = gamma[c] * inv_std[c];
        if batch_statistics {
            l.for_each_channel_value(c, |i| {
                gx[i] = scale * (grad_out[i] - sum_g / count - xhat[i] * sum_gx / count);
            });
        } else {
            l.for_each_channel_value(c, |i| gx[i] = scale * grad_out[i]);
        }
    }
    (gx, ggamma, gbeta)
}

/// Non-overlapping max pooling. Returns output and the flat argmax index of
/// every output cell. Ties resolve to the first maximum in scan order.
pub fn max_pool_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f32>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * size * w + j * size;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = base + (i * size + di) * w + j * size + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Mean cross-entropy of softmax(logits) against integer labels.
/// Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f32, Vec<f32>) {
    let mut probs = vec![0.0f32; logits.len()];
    let mut total = 0.0f32;
    for (n, row) in logits.chunks_exact(classes).enumerate() {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let p = &mut probs[n * classes..][..classes];
        let mut z = 0.0f32;
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - m).exp();
            z += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= z;
        }
        total += z.ln() + m - row[labels[n]];
    }
    (total / labels.len() as f32, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_rejects_uneven_tiling() {
        assert_eq!(ConvGeom::out_extent(16, 3, 1, 1), Some(16));
        assert_eq!(ConvGeom::out_extent(5, 2, 2, 0), None);
        assert_eq!(ConvGeom::out_extent(6, 2, 2, 0), Some(3));
        assert_eq!(ConvGeom::out_extent(1, 3, 1, 0), None);
    }

    #[test]
    fn max_pool_ties_take_first() {
        let (out, arg) = max_pool_forward(&[1.0, 1.0, 0.0, 1.0], 1, 2, 2, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
