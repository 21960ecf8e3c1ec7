//! Neural-network kernels on the tape. All image tensors are `[B, C, H, W]`
//! row-major.

use rand::Rng;

use super::{accumulate, Node, NodeId, Op, Phase, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct BatchNormCtx {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub training: bool,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

fn image_shape(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("{what} expects [B,C,H,W], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl Tape {
    /// 2-d convolution, stride 1, zero padding `k/2` (shape-preserving).
    /// `weight` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`, `k` is 1 or 3.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (b, cin, h, w) = image_shape(self.shape(x), "conv2d")?;
        let wsh = self.shape(weight).to_vec();
        if wsh.len() != 4 || wsh[1] != cin || wsh[2] != wsh[3] {
            return Err(Error::shape(format!(
                "conv2d weight must be [Cout, {cin}, k, k], got {wsh:?}"
            )));
        }
        let (cout, k) = (wsh[0], wsh[2]);
        if k != 1 && k != 3 {
            return Err(Error::shape(format!("conv2d supports kernel size 1 or 3, got {k}")));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{cout}], got {:?}",
                self.shape(bias)
            )));
        }
        let pad = k / 2;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[weight.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0; b * cout * h * w];
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * h * w;
                out[obase..obase + h * w].fill(bv[co]);
                for ci in 0..cin {
                    let xbase = (bi * cin + ci) * h * w;
                    for di in 0..k {
                        for dj in 0..k {
                            let wvv = wv[((co * cin + ci) * k + di) * k + dj];
                            if wvv == 0.0 {
                                continue;
                            }
                            // out[i][j] += w * x[i+di-pad][j+dj-pad] over valid indices
                            let i_lo = pad.saturating_sub(di);
                            let i_hi = (h + pad - di).min(h);
                            let j_lo = pad.saturating_sub(dj);
                            let j_hi = (w + pad - dj).min(w);
                            for i in i_lo..i_hi {
                                let si = i + di - pad;
                                let orow = obase + i * w;
                                let xrow = xbase + si * w;
                                for j in j_lo..j_hi {
                                    out[orow + j] += wvv * xv[xrow + j + dj - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Op::Conv2d { ksize: k, pad },
            vec![x, weight, bias],
            vec![b, cout, h, w],
            out,
        )
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = image_shape(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let xbase = bc * h * w;
            let obase = bc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let p = xbase + 2 * i * w + 2 * j;
                    out[obase + i * ow + j] = 0.25 * (xv[p] + xv[p + 1] + xv[p + w] + xv[p + w + 1]);
                }
            }
        }
        self.push(Op::AvgPool2, vec![x], vec![b, c, oh, ow], out)
    }

    /// Bilinear 2x upsampling with half-pixel centers (align_corners=false).
    pub fn upsample_bilinear2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = image_shape(self.shape(x), "upsample_bilinear2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let rows = bilinear_taps(h);
        let cols = bilinear_taps(w);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let xbase = bc * h * w;
            let obase = bc * oh * ow;
            for (oi, &(i0, i1, wi)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, wj)) in cols.iter().enumerate() {
                    let v = (1.0 - wi) * ((1.0 - wj) * xv[xbase + i0 * w + j0] + wj * xv[xbase + i0 * w + j1])
                        + wi * ((1.0 - wj) * xv[xbase + i1 * w + j0] + wj * xv[xbase + i1 * w + j1]);
                    out[obase + oi * ow + oj] = v;
                }
            }
        }
        self.push(Op::UpsampleBilinear2, vec![x], vec![b, c, oh, ow], out)
    }

    /// Per-channel batch normalization. `stats` holds running mean then
    /// running variance (`2*C` values); training mode normalizes with batch
    /// statistics and updates `stats` in place, eval mode reads them.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut [f64],
        phase: Phase,
    ) -> Result<NodeId> {
        let (b, c, h, w) = image_shape(self.shape(x), "batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batchnorm2d scale/shift must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if stats.len() != 2 * c {
            return Err(Error::shape(format!(
                "batchnorm2d stats must hold 2*{c} values, got {}",
                stats.len()
            )));
        }
        let n = b * h * w;
        let xv = &self.nodes[x.0].values;
        let (mean, var) = match phase {
            Phase::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        s += xv[base..base + h * w].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        for &v in &xv[base..base + h * w] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = sq / n as f64;
                }
                // running stats use the unbiased variance when possible
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                for ci in 0..c {
                    stats[ci] = (1.0 - BN_MOMENTUM) * stats[ci] + BN_MOMENTUM * mean[ci];
                    stats[c + ci] =
                        (1.0 - BN_MOMENTUM) * stats[c + ci] + BN_MOMENTUM * var[ci] * unbias;
                }
                (mean, var)
            }
            Phase::Eval => (stats[..c].to_vec(), stats[c..].to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let (m, istd, g, bb) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for p in base..base + h * w {
                    out[p] = (xv[p] - m) * istd * g + bb;
                }
            }
        }
        self.push(
            Op::BatchNorm(BatchNormCtx {
                mean,
                inv_std,
                training: phase == Phase::Train,
            }),
            vec![x, gamma, beta],
            vec![b, c, h, w],
            out,
        )
    }

    /// Inverted dropout. When inactive or `rate == 0` this is the identity
    /// (returns the input node). `rate` must lie in `[0, 1)`.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        active: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !active || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let xv = &self.nodes[x.0].values;
        let mask: Vec<bool> = (0..xv.len()).map(|_| rng.random::<f64>() < keep).collect();
        let values: Vec<f64> = xv
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * scale } else { 0.0 })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Dropout { scale, mask }, vec![x], shape, values)
    }

    /// Mean softmax cross-entropy over two-class logits `[B, 2, H, W]`
    /// against per-pixel targets in `{0, 1}` (length `B*H*W`).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: &[f64]) -> Result<NodeId> {
        let (b, c, h, w) = image_shape(self.shape(logits), "softmax_cross_entropy")?;
        if c != 2 {
            return Err(Error::shape(format!("softmax_cross_entropy expects 2 classes, got {c}")));
        }
        if target.len() != b * h * w {
            return Err(Error::shape(format!(
                "target length {} does not match {b}x{h}x{w} pixels",
                target.len()
            )));
        }
        if let Some(bad) = target.iter().find(|t| **t != 0.0 && **t != 1.0) {
            return Err(Error::data(format!("targets must be 0 or 1, got {bad}")));
        }
        let lv = &self.nodes[logits.0].values;
        let hw = h * w;
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let l0 = lv[(bi * 2) * hw + p];
                let l1 = lv[(bi * 2 + 1) * hw + p];
                let m = l0.max(l1);
                let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                let lt = if target[bi * hw + p] == 1.0 { l1 } else { l0 };
                total += lse - lt;
            }
        }
        let loss = total / (b * hw) as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                target: target.to_vec(),
            },
            vec![logits],
            vec![1],
            vec![loss],
        )
    }

    /// Spatial mean per channel: `[B, C, H, W]` to `[B, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = image_shape(self.shape(x), "global_avg_pool")?;
        let hw = (h * w) as f64;
        let xv = &self.nodes[x.0].values;
        let values: Vec<f64> = (0..b * c)
            .map(|bc| xv[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        self.push(Op::GlobalAvgPool, vec![x], vec![b, c], values)
    }

    /// Tiles a `[B, C]` tensor across space to `[B, C, H, W]`.
    pub fn broadcast_spatial(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::shape(format!("broadcast_spatial expects [B,C], got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let xv = &self.nodes[x.0].values;
        let mut values = vec![0.0; b * c * h * w];
        for bc in 0..b * c {
            values[bc * h * w..(bc + 1) * h * w].fill(xv[bc]);
        }
        self.push(Op::BroadcastSpatial, vec![x], vec![b, c, h, w], values)
    }

    /// Concatenates along the channel axis; batch and spatial dims must match.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() < 2 {
            return Err(Error::shape("concat_channels needs at least two inputs".to_string()));
        }
        let (b, _, h, w) = image_shape(self.shape(parts[0]), "concat_channels")?;
        let mut total_c = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = image_shape(self.shape(p), "concat_channels")?;
            if pb != b || ph != h || pw != w {
                return Err(Error::shape(format!(
                    "concat_channels operands disagree: [{b},*,{h},{w}] vs {:?}",
                    self.shape(p)
                )));
            }
            total_c += pc;
        }
        let mut values = vec![0.0; b * total_c * h * w];
        for bi in 0..b {
            let mut coff = 0;
            for &p in parts {
                let pc = self.nodes[p.0].shape[1];
                let src = &self.nodes[p.0].values[bi * pc * h * w..(bi + 1) * pc * h * w];
                let dst = (bi * total_c + coff) * h * w;
                values[dst..dst + pc * h * w].copy_from_slice(src);
                coff += pc;
            }
        }
        self.push(
            Op::ConcatChannels,
            parts.to_vec(),
            vec![b, total_c, h, w],
            values,
        )
    }
}

/// Interpolation taps for one axis of 2x bilinear upsampling: output index
/// maps to source `(o + 0.5)/2 - 0.5`, clamped at the edges.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(super) fn backward(node: &Node, before: &mut [Node], go: &[f64]) {
    match &node.op {
        Op::Conv2d { ksize, pad } => conv2d_backward(node, before, go, *ksize, *pad),
        Op::AvgPool2 => {
            let x = node.inputs[0];
            let (b, c, oh, ow) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
            let (h, w) = (2 * oh, 2 * ow);
            let mut gx = vec![0.0; before[x.0].values.len()];
            for bc in 0..b * c {
                let xbase = bc * h * w;
                let obase = bc * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let g = 0.25 * go[obase + i * ow + j];
                        let p = xbase + 2 * i * w + 2 * j;
                        gx[p] += g;
                        gx[p + 1] += g;
                        gx[p + w] += g;
                        gx[p + w + 1] += g;
                    }
                }
            }
            accumulate(before, x, &gx);
        }
        Op::UpsampleBilinear2 => {
            let x = node.inputs[0];
            let (b, c) = (node.shape[0], node.shape[1]);
            let (h, w) = (before[x.0].shape[2], before[x.0].shape[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let rows = bilinear_taps(h);
            let cols = bilinear_taps(w);
            let mut gx = vec![0.0; before[x.0].values.len()];
            for bc in 0..b * c {
                let xbase = bc * h * w;
                let obase = bc * oh * ow;
                for (oi, &(i0, i1, wi)) in rows.iter().enumerate() {
                    for (oj, &(j0, j1, wj)) in cols.iter().enumerate() {
                        let g = go[obase + oi * ow + oj];
                        gx[xbase + i0 * w + j0] += (1.0 - wi) * (1.0 - wj) * g;
                        gx[xbase + i0 * w + j1] += (1.0 - wi) * wj * g;
                        gx[xbase + i1 * w + j0] += wi * (1.0 - wj) * g;
                        gx[xbase + i1 * w + j1] += wi * wj * g;
                    }
                }
            }
            accumulate(before, x, &gx);
        }
        Op::BatchNorm(ctx) => batchnorm_backward(node, before, go, ctx),
        Op::Dropout { scale, mask } => {
            let gx: Vec<f64> = go
                .iter()
                .zip(mask)
                .map(|(&g, &m)| if m { g * scale } else { 0.0 })
                .collect();
            accumulate(before, node.inputs[0], &gx);
        }
        Op::SoftmaxCrossEntropy { target } => {
            let x = node.inputs[0];
            let (b, _, h, w) = node_shape4(&before[x.0].shape);
            let hw = h * w;
            let lv = &before[x.0].values;
            let scale = go[0] / (b * hw) as f64;
            let mut gx = vec![0.0; lv.len()];
            for bi in 0..b {
                for p in 0..hw {
                    let i0 = (bi * 2) * hw + p;
                    let i1 = (bi * 2 + 1) * hw + p;
                    let m = lv[i0].max(lv[i1]);
                    let e0 = (lv[i0] - m).exp();
                    let e1 = (lv[i1] - m).exp();
                    let z = e0 + e1;
                    let t = target[bi * hw + p];
                    gx[i0] = (e0 / z - (1.0 - t)) * scale;
                    gx[i1] = (e1 / z - t) * scale;
                }
            }
            accumulate(before, x, &gx);
        }
        Op::GlobalAvgPool => {
            let x = node.inputs[0];
            let (h, w) = (before[x.0].shape[2], before[x.0].shape[3]);
            let hw = h * w;
            let mut gx = vec![0.0; before[x.0].values.len()];
            for bc in 0..go.len() {
                let g = go[bc] / hw as f64;
                gx[bc * hw..(bc + 1) * hw].fill(g);
            }
            accumulate(before, x, &gx);
        }
        Op::BroadcastSpatial => {
            let x = node.inputs[0];
            let hw = node.shape[2] * node.shape[3];
            let gx: Vec<f64> = (0..before[x.0].values.len())
                .map(|bc| go[bc * hw..(bc + 1) * hw].iter().sum())
                .collect();
            accumulate(before, x, &gx);
        }
        Op::ConcatChannels => {
            let (b, total_c, h, w) = node_shape4(&node.shape);
            let hw = h * w;
            let mut coff = 0;
            for &p in &node.inputs {
                let pc = before[p.0].shape[1];
                let mut gp = vec![0.0; b * pc * hw];
                for bi in 0..b {
                    let src = (bi * total_c + coff) * hw;
                    gp[bi * pc * hw..(bi + 1) * pc * hw]
                        .copy_from_slice(&go[src..src + pc * hw]);
                }
                accumulate(before, p, &gp);
                coff += pc;
            }
        }
        _ => unreachable!("nn::backward got a non-nn op"),
    }
}

fn node_shape4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

// index loops mirror the forward kernel layout
#[allow(clippy::needless_range_loop)]
fn conv2d_backward(node: &Node, before: &mut [Node], go: &[f64], k: usize, pad: usize) {
    let (x, weight, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
    let (b, cout, h, w) = node_shape4(&node.shape);
    let cin = before[x.0].shape[1];
    let xv = &before[x.0].values;
    let wv = &before[weight.0].values;
    let mut gx = vec![0.0; xv.len()];
    let mut gw = vec![0.0; wv.len()];
    let mut gb = vec![0.0; cout];
    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * h * w;
            gb[co] += go[obase..obase + h * w].iter().sum::<f64>();
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * w;
                for di in 0..k {
                    for dj in 0..k {
                        let widx = ((co * cin + ci) * k + di) * k + dj;
                        let wvv = wv[widx];
                        let i_lo = pad.saturating_sub(di);
                        let i_hi = (h + pad - di).min(h);
                        let j_lo = pad.saturating_sub(dj);
                        let j_hi = (w + pad - dj).min(w);
                        let mut wacc = 0.0;
                        for i in i_lo..i_hi {
                            let si = i + di - pad;
                            let orow = obase + i * w;
                            let xrow = xbase + si * w;
                            for j in j_lo..j_hi
                            {
                                let g = go[orow + j];
                                let xi = xrow + j + dj - pad;
                                gx[xi] += wvv * g;
                                wacc += xv[xi] * g;
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
    accumulate(before, x, &gx);
    accumulate(before, weight, &gw);
    accumulate(before, bias, &gb);
}

fn batchnorm_backward(node: &Node, before: &mut [Node], go: &[f64], ctx: &BatchNormCtx) {
    let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
    let (b, c, h, w) = node_shape4(&node.shape);
    let n = (b * h * w) as f64;
    let xv = &before[x.0].values;
    let gv = &before[gamma.0].values;
    let mut gx = vec![0.0; xv.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ci in 0..c {
        let (m, istd) = (ctx.mean[ci], ctx.inv_std[ci]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for p in base..base + h * w {
                let xhat = (xv[p] - m) * istd;
                sum_g += go[p];
                sum_gx += go[p] * xhat;
            }
        }
        ggamma[ci] = sum_gx;
        gbeta[ci] = sum_g;
        let g = gv[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for p in base..base + h * w {
                if ctx.training {
                    let xhat = (xv[p] - m) * istd;
                    gx[p] = g * istd * (go[p] - sum_g / n - xhat * sum_gx / n);
                } else {
                    gx[p] = g * istd * go[p];
                }
            }
        }
    }
    accumulate(before, x, &gx);
    accumulate(before, gamma, &ggamma);
    accumulate(before, beta, &gbeta);
}
