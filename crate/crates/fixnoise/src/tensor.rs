//! Dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! The tape is an arena of nodes; a `TensorId` indexes into it. Every op
//! records its inputs and enough saved state to run its backward rule.
//! Tapes are rebuilt per training step, so nothing here tries to reuse
//! graphs. All math is f64; forward passes are bit-deterministic for a
//! given input regardless of the rayon pool size, because parallel kernels
//! split work so each output element is written by exactly one task with a
//! fixed sequential reduction inside.
//!
//! `backward` runs plain buffer math. `backward_graph` instead emits the
//! backward computation as new tape nodes, which is what lets the gradient
//! penalty on the critic be differentiated again with a single mechanism.

use crate::error::Result;
use rayon::prelude::*;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Rsqrt(TensorId),
    Softplus(TensorId),
    LeakyRelu(TensorId, f64),
    Sum(TensorId),
    Mean(TensorId),
    /// Scalar broadcast to `shape`, multiplied by a constant.
    BroadcastScalar(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    /// Zero-padded same-size cross-correlation, stride 1, odd kernel.
    Conv2d(TensorId, TensorId),
    /// [O,C,kh,kw] -> [C,O,kh,kw] with both spatial axes flipped.
    ConvWeightFlip(TensorId),
    /// [O,C,kh,kw] -> [O,C], sum of squares over the kernel window.
    WeightSqRowsum(TensorId),
    BiasChannel(TensorId, TensorId),
    BiasRow(TensorId, TensorId),
    /// x[N,C,H,W] * s[N,C], broadcast over space.
    ChannelScale(TensorId, TensorId),
    /// x[m,n] * s[m], broadcast over columns.
    RowScale(TensorId, TensorId),
    /// x[m,n] -> [m], mean of squares per row.
    RowMeanSquare(TensorId),
    /// x + strength * field, field [H,W] broadcast over batch and channels.
    AddNoise { x: TensorId, field: TensorId, strength: TensorId },
    /// Border-renormalized [1,2,1]x[1,2,1] depthwise smoothing.
    SmoothNorm(TensorId),
    /// Adjoint of `SmoothNorm` (scale by mass, then smooth).
    SmoothNormAdj(TensorId),
    NnRepeat2(TensorId),
    BlockSum2(TensorId),
    Decimate2(TensorId),
    ZeroStuff2(TensorId),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Arena of tensors plus the recorded operations that produced them.
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node { data, shape, requires_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    /// New leaf tensor. Gradients accumulate here when `requires_grad`.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(data.len(), numel(&shape), "leaf data/shape mismatch");
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], vec![1], false)
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn value(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg2(&self, a: TensorId, b: TensorId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, self.rg2(a, b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, self.rg2(a, b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, self.rg2(a, b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::AddScalar(a))
    }

    pub fn rsqrt(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| 1.0 / x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Rsqrt(a))
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::LeakyRelu(a, slope))
    }

    // ── Reductions / broadcast ──────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s / n as f64], vec![1], rg, Op::Mean(a))
    }

    /// out[i] = a[0] * c for every element of `shape`.
    pub fn broadcast_scalar(&mut self, a: TensorId, shape: Vec<usize>, c: f64) -> Result<TensorId> {
        if self.nodes[a.0].data.len() != 1 {
            return Err(err_contract!("broadcast_scalar needs a scalar input"));
        }
        let v = self.nodes[a.0].data[0] * c;
        let rg = self.nodes[a.0].requires_grad;
        let n = numel(&shape);
        Ok(self.push(vec![v; n], shape, rg, Op::BroadcastScalar(a, c)))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(err_dim!("matmul: incompatible shapes {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(data, vec![m, n], self.rg2(a, b), Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(err_dim!("transpose: expected 2-d, got {:?}", s));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, vec![n, m], rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(err_dim!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                self.nodes[a.0].shape,
                self.nodes[a.0].data.len(),
                shape,
                numel(&shape)
            ));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Reshape(a)))
    }

    // ── Convolution and friends ─────────────────────────────────────────

    /// Cross-correlation with zero padding, stride 1, odd square-ish kernel.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(err_dim!("conv2d: expected 4-d input/weight, got {:?} and {:?}", sx, sw));
        }
        if sx[1] != sw[1] {
            return Err(err_dim!(
                "conv2d: channel mismatch, input {:?} vs weight {:?}",
                sx,
                sw
            ));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(err_dim!("conv2d: kernel extents must be odd, got {:?}", sw));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let data = conv2d_raw(&self.nodes[x.0].data, &self.nodes[w.0].data, n, c, h, wd, o, kh, kw);
        Ok(self.push(data, vec![n, o, h, wd], self.rg2(x, w), Op::Conv2d(x, w)))
    }

    /// Weight transform whose conv computes the adjoint of `conv2d` in x.
    pub fn conv_weight_flip(&mut self, w: TensorId) -> Result<TensorId> {
        let s = &self.nodes[w.0].shape;
        if s.len() != 4 {
            return Err(err_dim!("conv_weight_flip: expected 4-d weight, got {:?}", s));
        }
        let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
        let src = &self.nodes[w.0].data;
        let mut data = vec![0.0; o * c * kh * kw];
        for oo in 0..o {
            for cc in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let v = src[((oo * c + cc) * kh + i) * kw + j];
                        data[((cc * o + oo) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] = v;
                    }
                }
            }
        }
        let rg = self.nodes[w.0].requires_grad;
        Ok(self.push(data, vec![c, o, kh, kw], rg, Op::ConvWeightFlip(w)))
    }

    /// out[o,c] = sum over the kernel window of w^2.
    pub fn weight_sq_rowsum(&mut self, w: TensorId) -> Result<TensorId> {
        let s = &self.nodes[w.0].shape;
        if s.len() != 4 {
            return Err(err_dim!("weight_sq_rowsum: expected 4-d weight, got {:?}", s));
        }
        let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
        let src = &self.nodes[w.0].data;
        let mut data = vec![0.0; o * c];
        for oc in 0..o * c {
            let base = oc * kh * kw;
            let mut acc = 0.0;
            for k in 0..kh * kw {
                let v = src[base + k];
                acc += v * v;
            }
            data[oc] = acc;
        }
        let rg = self.nodes[w.0].requires_grad;
        Ok(self.push(data, vec![o, c], rg, Op::WeightSqRowsum(w)))
    }

    pub fn bias_channel(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(err_dim!("bias_channel: input {:?} vs bias {:?}", sx, sb));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let xb = &self.nodes[x.0].data;
        let bb = &self.nodes[b.0].data;
        let mut data = vec![0.0; xb.len()];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let bv = bb[cc];
                for k in 0..hw {
                    data[base + k] = xb[base + k] + bv;
                }
            }
        }
        let shape = sx.clone();
        Ok(self.push(data, shape, self.rg2(x, b), Op::BiasChannel(x, b)))
    }

    pub fn bias_row(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(err_dim!("bias_row: input {:?} vs bias {:?}", sx, sb));
        }
        let (m, n) = (sx[0], sx[1]);
        let xb = &self.nodes[x.0].data;
        let bb = &self.nodes[b.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = xb[i * n + j] + bb[j];
            }
        }
        Ok(self.push(data, vec![m, n], self.rg2(x, b), Op::BiasRow(x, b)))
    }

    pub fn channel_scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (sx, ss) = (&self.nodes[x.0].shape, &self.nodes[s.0].shape);
        if sx.len() != 4 || ss.len() != 2 || ss[0] != sx[0] || ss[1] != sx[1] {
            return Err(err_dim!("channel_scale: input {:?} vs scale {:?}", sx, ss));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let xb = &self.nodes[x.0].data;
        let sb = &self.nodes[s.0].data;
        let mut data = vec![0.0; xb.len()];
        for nc in 0..n * c {
            let sv = sb[nc];
            let base = nc * hw;
            for k in 0..hw {
                data[base + k] = xb[base + k] * sv;
            }
        }
        let shape = sx.clone();
        Ok(self.push(data, shape, self.rg2(x, s), Op::ChannelScale(x, s)))
    }

    pub fn row_scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (sx, ss) = (&self.nodes[x.0].shape, &self.nodes[s.0].shape);
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(err_dim!("row_scale: input {:?} vs scale {:?}", sx, ss));
        }
        let (m, n) = (sx[0], sx[1]);
        let xb = &self.nodes[x.0].data;
        let sb = &self.nodes[s.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let sv = sb[i];
            for j in 0..n {
                data[i * n + j] = xb[i * n + j] * sv;
            }
        }
        Ok(self.push(data, vec![m, n], self.rg2(x, s), Op::RowScale(x, s)))
    }

    pub fn row_mean_square(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(err_dim!("row_mean_square: expected 2-d, got {:?}", sx));
        }
        let (m, n) = (sx[0], sx[1]);
        let xb = &self.nodes[x.0].data;
        let mut data = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                let v = xb[i * n + j];
                acc += v * v;
            }
            data[i] = acc / n as f64;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, vec![m], rg, Op::RowMeanSquare(x)))
    }

    /// x + strength * field. `field` is a [H,W] tensor broadcast over batch
    /// and channels; `strength` is a [1] tensor (usually a parameter).
    pub fn add_noise(&mut self, x: TensorId, field: TensorId, strength: TensorId) -> Result<TensorId> {
        let (sx, sf) = (&self.nodes[x.0].shape, &self.nodes[field.0].shape);
        if sx.len() != 4 || sf.len() != 2 || sf[0] != sx[2] || sf[1] != sx[3] {
            return Err(err_dim!("add_noise: input {:?} vs field {:?}", sx, sf));
        }
        if self.nodes[strength.0].data.len() != 1 {
            return Err(err_dim!("add_noise: strength must be a scalar tensor"));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let st = self.nodes[strength.0].data[0];
        let xb = &self.nodes[x.0].data;
        let fb = &self.nodes[field.0].data;
        let mut data = vec![0.0; xb.len()];
        for nc in 0..n * c {
            let base = nc * hw;
            for k in 0..hw {
                data[base + k] = xb[base + k] + st * fb[k];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[field.0].requires_grad
            || self.nodes[strength.0].requires_grad;
        let shape = sx.clone();
        Ok(self.push(data, shape, rg, Op::AddNoise { x, field, strength }))
    }

    // ── Resampling primitives ───────────────────────────────────────────

    pub fn smooth_norm(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.check_nchw(x, "smooth_norm")?;
        let data = smooth_raw(&self.nodes[x.0].data, sx, false);
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::SmoothNorm(x)))
    }

    pub fn smooth_norm_adj(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.check_nchw(x, "smooth_norm_adj")?;
        let data = smooth_raw(&self.nodes[x.0].data, sx, true);
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::SmoothNormAdj(x)))
    }

    pub fn nn_repeat2(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.check_nchw(x, "nn_repeat2")?;
        let xb = &self.nodes[x.0].data;
        let mut data = vec![0.0; n * c * 4 * h * w];
        for nc in 0..n * c {
            let src = nc * h * w;
            let dst = nc * 4 * h * w;
            for y in 0..h {
                for xcol in 0..w {
                    let v = xb[src + y * w + xcol];
                    let d0 = dst + (2 * y) * (2 * w) + 2 * xcol;
                    let d1 = dst + (2 * y + 1) * (2 * w) + 2 * xcol;
                    data[d0] = v;
                    data[d0 + 1] = v;
                    data[d1] = v;
                    data[d1 + 1] = v;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, vec![n, c, 2 * h, 2 * w], rg, Op::NnRepeat2(x)))
    }

    pub fn block_sum2(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.check_nchw(x, "block_sum2")?;
        self.check_even(h, w, "block_sum2")?;
        let xb = &self.nodes[x.0].data;
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = nc * h * w;
            let dst = nc * oh * ow;
            for y in 0..oh {
                for xcol in 0..ow {
                    let s0 = src + (2 * y) * w + 2 * xcol;
                    let s1 = src + (2 * y + 1) * w + 2 * xcol;
                    data[dst + y * ow + xcol] = xb[s0] + xb[s0 + 1] + xb[s1] + xb[s1 + 1];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, vec![n, c, oh, ow], rg, Op::BlockSum2(x)))
    }

    pub fn decimate2(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.check_nchw(x, "decimate2")?;
        self.check_even(h, w, "decimate2")?;
        let xb = &self.nodes[x.0].data;
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = nc * h * w;
            let dst = nc * oh * ow;
            for y in 0..oh {
                for xcol in 0..ow {
                    data[dst + y * ow + xcol] = xb[src + (2 * y) * w + 2 * xcol];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, vec![n, c, oh, ow], rg, Op::Decimate2(x)))
    }

    pub fn zero_stuff2(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.check_nchw(x, "zero_stuff2")?;
        let xb = &self.nodes[x.0].data;
        let mut data = vec![0.0; n * c * 4 * h * w];
        for nc in 0..n * c {
            let src = nc * h * w;
            let dst = nc * 4 * h * w;
            for y in 0..h {
                for xcol in 0..w {
                    data[dst + (2 * y) * (2 * w) + 2 * xcol] = xb[src + y * w + xcol];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, vec![n, c, 2 * h, 2 * w], rg, Op::ZeroStuff2(x)))
    }

    /// Nearest-neighbor 2x upsample followed by normalized smoothing.
    pub fn resample_up2(&mut self, x: TensorId) -> Result<TensorId> {
        let r = self.nn_repeat2(x)?;
        self.smooth_norm(r)
    }

    /// Normalized smoothing followed by stride-2 decimation.
    pub fn resample_down2(&mut self, x: TensorId) -> Result<TensorId> {
        let (_, _, h, w) = self.check_nchw(x, "resample_down2")?;
        self.check_even(h, w, "resample_down2")?;
        let s = self.smooth_norm(x)?;
        self.decimate2(s)
    }

    fn check_nchw(&self, x: TensorId, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(err_dim!("{what}: expected 4-d NCHW, got {:?}", s));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn check_even(&self, h: usize, w: usize, what: &str) -> Result<()> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(err_dim!("{what}: spatial extents must be even, got {h}x{w}"));
        }
        Ok(())
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(err_dim!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.nodes[a.0].shape,
                self.nodes[b.0].shape
            ));
        }
        Ok(())
    }

    // ── Reverse pass (buffer math) ──────────────────────────────────────

    /// Populate `grad` on every `requires_grad` ancestor of a scalar loss.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(err_contract!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(err_contract!("backward: loss is not connected to any requires_grad tensor"));
        }
        // Local adjoint buffers; node.grad only accumulates the final values,
        // so separate backward calls stay additive.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.apply_backward(&op, &g, &mut adj)?;
            if matches!(op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accum(&self, adj: &mut [Option<Vec<f64>>], t: TensorId, contrib: Vec<f64>) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        match &mut adj[t.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn apply_backward(&mut self, op: &Op, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(adj, a, g.to_vec());
                self.accum(adj, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(adj, a, g.to_vec());
                self.accum(adj, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(gv, bv)| gv * bv).collect();
                    self.accum(adj, a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(gv, av)| gv * av).collect();
                    self.accum(adj, b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accum(adj, a, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => {
                self.accum(adj, a, g.to_vec());
            }
            Op::Rsqrt(a) => {
                // d/dx x^-1/2 = -1/2 x^-3/2
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(gv, &x)| gv * (-0.5) / (x * x.sqrt()))
                    .collect();
                self.accum(adj, a, da);
            }
            Op::Softplus(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(gv, &x)| gv / (1.0 + (-x).exp()))
                    .collect();
                self.accum(adj, a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(gv, &x)| if x >= 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accum(adj, a, da);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].data.len();
                self.accum(adj, a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len();
                self.accum(adj, a, vec![g[0] / n as f64; n]);
            }
            Op::BroadcastScalar(a, c) => {
                let s: f64 = g.iter().sum();
                self.accum(adj, a, vec![s * c]);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = g . B^T
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accum(adj, a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T . g
                    let at = transpose_raw(&self.nodes[a.0].data, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accum(adj, b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                self.accum(adj, a, transpose_raw(g, n, m));
            }
            Op::Reshape(a) => {
                self.accum(adj, a, g.to_vec());
            }
            Op::Conv2d(x, w) => {
                let sx = self.nodes[x.0].shape.clone();
                let sw = self.nodes[w.0].shape.clone();
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                if self.nodes[x.0].requires_grad {
                    let wf = conv_weight_flip_raw(&self.nodes[w.0].data, o, c, kh, kw);
                    let dx = conv2d_raw(g, &wf, n, o, h, wd, c, kh, kw);
                    self.accum(adj, x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let dw = conv2d_wgrad_raw(&self.nodes[x.0].data, g, n, c, h, wd, o, kh, kw);
                    self.accum(adj, w, dw);
                }
            }
            Op::ConvWeightFlip(w) => {
                let s = &self.nodes[w.0].shape;
                let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
                // g has shape [C,O,kh,kw]; invert the permutation.
                let mut dw = vec![0.0; o * c * kh * kw];
                for cc in 0..c {
                    for oo in 0..o {
                        for i in 0..kh {
                            for j in 0..kw {
                                let v = g[((cc * o + oo) * kh + i) * kw + j];
                                dw[((oo * c + cc) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] = v;
                            }
                        }
                    }
                }
                self.accum(adj, w, dw);
            }
            Op::WeightSqRowsum(w) => {
                let s = &self.nodes[w.0].shape;
                let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
                let src = &self.nodes[w.0].data;
                let mut dw = vec![0.0; src.len()];
                for oc in 0..o * c {
                    let gv = g[oc];
                    let base = oc * kh * kw;
                    for k in 0..kh * kw {
                        dw[base + k] = 2.0 * src[base + k] * gv;
                    }
                }
                self.accum(adj, w, dw);
            }
            Op::BiasChannel(x, b) => {
                let s = &self.nodes[x.0].shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.nodes[x.0].requires_grad {
                    self.accum(adj, x, g.to_vec());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; c];
                    for nn in 0..n {
                        for cc in 0..c {
                            let base = (nn * c + cc) * hw;
                            let mut acc = 0.0;
                            for k in 0..hw {
                                acc += g[base + k];
                            }
                            db[cc] += acc;
                        }
                    }
                    self.accum(adj, b, db);
                }
            }
            Op::BiasRow(x, b) => {
                let s = &self.nodes[x.0].shape;
                let (m, n) = (s[0], s[1]);
                if self.nodes[x.0].requires_grad {
                    self.accum(adj, x, g.to_vec());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.accum(adj, b, db);
                }
            }
            Op::ChannelScale(x, sid) => {
                let s = &self.nodes[x.0].shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.nodes[x.0].requires_grad {
                    let sb = &self.nodes[sid.0].data;
                    let mut dx = vec![0.0; g.len()];
                    for nc in 0..n * c {
                        let sv = sb[nc];
                        let base = nc * hw;
                        for k in 0..hw {
                            dx[base + k] = g[base + k] * sv;
                        }
                    }
                    self.accum(adj, x, dx);
                }
                if self.nodes[sid.0].requires_grad {
                    let xb = &self.nodes[x.0].data;
                    let mut ds = vec![0.0; n * c];
                    for nc in 0..n * c {
                        let base = nc * hw;
                        let mut acc = 0.0;
                        for k in 0..hw {
                            acc += g[base + k] * xb[base + k];
                        }
                        ds[nc] = acc;
                    }
                    self.accum(adj, sid, ds);
                }
            }
            Op::RowScale(x, sid) => {
                let s = &self.nodes[x.0].shape;
                let (m, n) = (s[0], s[1]);
                if self.nodes[x.0].requires_grad {
                    let sb = &self.nodes[sid.0].data;
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..m {
                        let sv = sb[i];
                        for j in 0..n {
                            dx[i * n + j] = g[i * n + j] * sv;
                        }
                    }
                    self.accum(adj, x, dx);
                }
                if self.nodes[sid.0].requires_grad {
                    let xb = &self.nodes[x.0].data;
                    let mut ds = vec![0.0; m];
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * xb[i * n + j];
                        }
                        ds[i] = acc;
                    }
                    self.accum(adj, sid, ds);
                }
            }
            Op::RowMeanSquare(x) => {
                let s = &self.nodes[x.0].shape;
                let (m, n) = (s[0], s[1]);
                let xb = &self.nodes[x.0].data;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let gv = g[i] * 2.0 / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = gv * xb[i * n + j];
                    }
                }
                self.accum(adj, x, dx);
            }
            Op::AddNoise { x, field, strength } => {
                let s = &self.nodes[x.0].shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.nodes[x.0].requires_grad {
                    self.accum(adj, x, g.to_vec());
                }
                if self.nodes[strength.0].requires_grad {
                    let fb = &self.nodes[field.0].data;
                    let mut acc = 0.0;
                    for nc in 0..n * c {
                        let base = nc * hw;
                        for k in 0..hw {
                            acc += g[base + k] * fb[k];
                        }
                    }
                    self.accum(adj, strength, vec![acc]);
                }
                if self.nodes[field.0].requires_grad {
                    let st = self.nodes[strength.0].data[0];
                    let mut df = vec![0.0; hw];
                    for nc in 0..n * c {
                        let base = nc * hw;
                        for k in 0..hw {
                            df[k] += g[base + k] * st;
                        }
                    }
                    self.accum(adj, field, df);
                }
            }
            Op::SmoothNorm(x) => {
                let sx = self.check_nchw(x, "smooth_norm backward")?;
                self.accum(adj, x, smooth_raw(g, sx, true));
            }
            Op::SmoothNormAdj(x) => {
                let sx = self.check_nchw(x, "smooth_norm_adj backward")?;
                self.accum(adj, x, smooth_raw(g, sx, false));
            }
            Op::NnRepeat2(x) => {
                let (n, c, h, w) = self.check_nchw(x, "nn_repeat2 backward")?;
                self.accum(adj, x, block_sum2_raw(g, n, c, 2 * h, 2 * w));
            }
            Op::BlockSum2(x) => {
                let (n, c, h, w) = self.check_nchw(x, "block_sum2 backward")?;
                self.accum(adj, x, nn_repeat2_raw(g, n, c, h / 2, w / 2));
            }
            Op::Decimate2(x) => {
                let (n, c, h, w) = self.check_nchw(x, "decimate2 backward")?;
                self.accum(adj, x, zero_stuff2_raw(g, n, c, h / 2, w / 2));
            }
            Op::ZeroStuff2(x) => {
                let (n, c, h, w) = self.check_nchw(x, "zero_stuff2 backward")?;
                self.accum(adj, x, decimate2_raw(g, n, c, 2 * h, 2 * w));
            }
        }
        Ok(())
    }

    // ── Reverse pass (graph recording) ──────────────────────────────────

    /// Compute d loss / d wrt as a new tensor on the tape, emitting the
    /// backward computation as recorded ops so it can itself be
    /// differentiated. Only the op set used by the critic is supported.
    pub fn backward_graph(&mut self, loss: TensorId, wrt: TensorId) -> Result<TensorId> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(err_contract!("backward_graph: loss must be scalar"));
        }
        // needed = ancestors of loss that wrt can reach (plus wrt itself).
        let mut reaches_wrt = vec![false; self.nodes.len()];
        reaches_wrt[wrt.0] = true;
        for i in wrt.0 + 1..self.nodes.len() {
            let ins = op_inputs(&self.nodes[i].op);
            if ins.iter().any(|t| reaches_wrt[t.0]) {
                reaches_wrt[i] = true;
            }
        }
        if !reaches_wrt[loss.0] {
            return Err(err_contract!("backward_graph: wrt does not feed the loss"));
        }
        let mut needed = vec![false; self.nodes.len()];
        needed[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            for t in op_inputs(&self.nodes[i].op) {
                if reaches_wrt[t.0] {
                    needed[t.0] = true;
                }
            }
        }

        let mut gmap: Vec<Option<TensorId>> = vec![None; loss.0 + 1];
        let one = self.constant(vec![1.0], vec![1]);
        gmap[loss.0] = Some(one);
        let top = loss.0;
        for i in (0..=top).rev() {
            if !needed[i] {
                continue;
            }
            let g = match gmap[i] {
                Some(g) => g,
                None => continue,
            };
            if i == wrt.0 {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.emit_backward(&op, g, &needed, &mut gmap)?;
        }
        gmap[wrt.0].ok_or_else(|| err_contract!("backward_graph: no gradient path reached wrt"))
    }

    fn emit_accum(
        &mut self,
        gmap: &mut [Option<TensorId>],
        needed: &[bool],
        t: TensorId,
        contrib: TensorId,
    ) -> Result<()> {
        if t.0 >= gmap.len() || !needed[t.0] {
            return Ok(());
        }
        gmap[t.0] = Some(match gmap[t.0] {
            Some(acc) => self.add(acc, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    fn emit_backward(
        &mut self,
        op: &Op,
        g: TensorId,
        needed: &[bool],
        gmap: &mut [Option<TensorId>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.emit_accum(gmap, needed, a, g)?;
                self.emit_accum(gmap, needed, b, g)?;
            }
            Op::Sub(a, b) => {
                self.emit_accum(gmap, needed, a, g)?;
                let neg = self.scale(g, -1.0);
                self.emit_accum(gmap, needed, b, neg)?;
            }
            Op::Mul(a, b) => {
                if needed[a.0] {
                    let da = self.mul(g, b)?;
                    self.emit_accum(gmap, needed, a, da)?;
                }
                if needed[b.0] {
                    let db = self.mul(g, a)?;
                    self.emit_accum(gmap, needed, b, db)?;
                }
            }
            Op::Scale(a, c) => {
                let da = self.scale(g, c);
                self.emit_accum(gmap, needed, a, da)?;
            }
            Op::AddScalar(a) => {
                self.emit_accum(gmap, needed, a, g)?;
            }
            Op::LeakyRelu(a, slope) => {
                // The mask is piecewise constant in the input, so it enters
                // the recorded graph as a plain constant.
                let mask: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .map(|&x| if x >= 0.0 { 1.0 } else { slope })
                    .collect();
                let shape = self.nodes[a.0].shape.clone();
                let m = self.constant(mask, shape);
                let da = self.mul(g, m)?;
                self.emit_accum(gmap, needed, a, da)?;
            }
            Op::Sum(a) => {
                let shape = self.nodes[a.0].shape.clone();
                let da = self.broadcast_scalar(g, shape, 1.0)?;
                self.emit_accum(gmap, needed, a, da)?;
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len();
                let shape = self.nodes[a.0].shape.clone();
                let da = self.broadcast_scalar(g, shape, 1.0 / n as f64)?;
                self.emit_accum(gmap, needed, a, da)?;
            }
            Op::Matmul(a, b) => {
                if needed[a.0] {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    self.emit_accum(gmap, needed, a, da)?;
                }
                if needed[b.0] {
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    self.emit_accum(gmap, needed, b, db)?;
                }
            }
            Op::Transpose(a) => {
                let da = self.transpose(g)?;
                self.emit_accum(gmap, needed, a, da)?;
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].shape.clone();
                let da = self.reshape(g, shape)?;
                self.emit_accum(gmap, needed, a, da)?;
            }
            Op::Conv2d(x, w) => {
                if needed[x.0] {
                    let wf = self.conv_weight_flip(w)?;
                    let dx = self.conv2d(g, wf)?;
                    self.emit_accum(gmap, needed, x, dx)?;
                }
                if needed[w.0] {
                    return Err(err_contract!(
                        "backward_graph: weight-side conv gradient is not recordable"
                    ));
                }
            }
            Op::BiasChannel(x, _) | Op::BiasRow(x, _) => {
                self.emit_accum(gmap, needed, x, g)?;
            }
            Op::ChannelScale(x, s) => {
                if needed[x.0] {
                    let dx = self.channel_scale(g, s)?;
                    self.emit_accum(gmap, needed, x, dx)?;
                }
                if needed[s.0] {
                    return Err(err_contract!(
                        "backward_graph: scale-side channel_scale gradient is not recordable"
                    ));
                }
            }
            Op::SmoothNorm(x) => {
                let dx = self.smooth_norm_adj(g)?;
                self.emit_accum(gmap, needed, x, dx)?;
            }
            Op::SmoothNormAdj(x) => {
                let dx = self.smooth_norm(g)?;
                self.emit_accum(gmap, needed, x, dx)?;
            }
            Op::NnRepeat2(x) => {
                let dx = self.block_sum2(g)?;
                self.emit_accum(gmap, needed, x, dx)?;
            }
            Op::BlockSum2(x) => {
                let dx = self.nn_repeat2(g)?;
                self.emit_accum(gmap, needed, x, dx)?;
            }
            Op::Decimate2(x) => {
                let dx = self.zero_stuff2(g)?;
                self.emit_accum(gmap, needed, x, dx)?;
            }
            Op::ZeroStuff2(x) => {
                let dx = self.decimate2(g)?;
                self.emit_accum(gmap, needed, x, dx)?;
            }
            _ => {
                return Err(err_contract!(
                    "backward_graph: op {:?} has no recordable backward",
                    op
                ))
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<TensorId> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
        Op::Scale(a, _) | Op::AddScalar(a) | Op::BroadcastScalar(a, _) | Op::LeakyRelu(a, _) => {
            vec![a]
        }
        Op::Rsqrt(a)
        | Op::Softplus(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::ConvWeightFlip(a)
        | Op::WeightSqRowsum(a)
        | Op::RowMeanSquare(a)
        | Op::SmoothNorm(a)
        | Op::SmoothNormAdj(a)
        | Op::NnRepeat2(a)
        | Op::BlockSum2(a)
        | Op::Decimate2(a)
        | Op::ZeroStuff2(a) => vec![a],
        Op::Conv2d(a, b)
        | Op::BiasChannel(a, b)
        | Op::BiasRow(a, b)
        | Op::ChannelScale(a, b)
        | Op::RowScale(a, b) => vec![a, b],
        Op::AddNoise { x, field, strength } => vec![x, field, strength],
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m >= 8 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (r, bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
        });
    } else {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (r, bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Shift-and-accumulate same-size cross-correlation with zero padding.
/// Each (n, o) output plane is produced by exactly one task.
fn conv2d_raw(
    x: &[f64],
    w: &[f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * wd;
    let mut out = vec![0.0; n * o * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(idx, plane)| {
        let (nn, oo) = (idx / o, idx % o);
        for cc in 0..c {
            let xplane = &x[(nn * c + cc) * hw..(nn * c + cc + 1) * hw];
            let wbase = (oo * c + cc) * kh * kw;
            for i in 0..kh {
                let dy = i as isize - ph as isize;
                for j in 0..kw {
                    let dx = j as isize - pw as isize;
                    let wv = w[wbase + i * kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((wd as isize - dx).min(wd as isize)) as usize;
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * wd;
                        let dst = y * wd;
                        let srow = &xplane[src + ((x0 as isize + dx) as usize)
                            ..src + ((x1 as isize + dx) as usize)];
                        let drow = &mut plane[dst + x0..dst + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    out
}

/// dW for conv2d: dw[o,c,i,j] = sum_{n,y,x} g[n,o,y,x] * xpad[n,c,y+i-ph,x+j-pw].
fn conv2d_wgrad_raw(
    x: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * wd;
    let mut out = vec![0.0; o * c * kh * kw];
    out.par_chunks_mut(kh * kw).enumerate().for_each(|(idx, wplane)| {
        let (oo, cc) = (idx / c, idx % c);
        for i in 0..kh {
            let dy = i as isize - ph as isize;
            for j in 0..kw {
                let dx = j as isize - pw as isize;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((wd as isize - dx).min(wd as isize)) as usize;
                let mut acc = 0.0;
                for nn in 0..n {
                    let gplane = &g[(nn * o + oo) * hw..(nn * o + oo + 1) * hw];
                    let xplane = &x[(nn * c + cc) * hw..(nn * c + cc + 1) * hw];
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * wd;
                        let dst = y * wd;
                        let srow = &xplane[src + ((x0 as isize + dx) as usize)
                            ..src + ((x1 as isize + dx) as usize)];
                        let grow = &gplane[dst + x0..dst + x1];
                        for (gv, sv) in grow.iter().zip(srow) {
                            acc += gv * sv;
                        }
                    }
                }
                wplane[i * kw + j] = acc;
            }
        }
    });
    out
}

fn conv_weight_flip_raw(w: &[f64], o: usize, c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * c * kh * kw];
    for oo in 0..o {
        for cc in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    out[((cc * o + oo) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] =
                        w[((oo * c + cc) * kh + i) * kw + j];
                }
            }
        }
    }
    out
}

/// Depthwise [1,2,1]x[1,2,1] smoothing with per-pixel mass renormalization so
/// constants are preserved at the borders. `adjoint` scales by the mass map
/// first and smooths after, which is the exact transpose.
fn smooth_raw(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), adjoint: bool) -> Vec<f64> {
    const K: [f64; 3] = [1.0, 2.0, 1.0];
    let hw = h * w;
    // mass[y][x] = sum of kernel weights landing inside the image
    let mass = |y: usize, x: usize| -> f64 {
        let my: f64 = (0..3)
            .map(|i| {
                let yy = y as isize + i - 1;
                if yy >= 0 && yy < h as isize {
                    K[i as usize]
                } else {
                    0.0
                }
            })
            .sum();
        let mx: f64 = (0..3)
            .map(|j| {
                let xx = x as isize + j - 1;
                if xx >= 0 && xx < w as isize {
                    K[j as usize]
                } else {
                    0.0
                }
            })
            .sum();
        my * mx
    };
    let mut out = vec![0.0; n * c * hw];
    for nc in 0..n * c {
        let src = &x[nc * hw..(nc + 1) * hw];
        let dst = &mut out[nc * hw..(nc + 1) * hw];
        let mut pre: Vec<f64>;
        let input: &[f64] = if adjoint {
            pre = src.to_vec();
            for y in 0..h {
                for xx in 0..w {
                    pre[y * w + xx] /= mass(y, xx);
                }
            }
            &pre
        } else {
            src
        };
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..3isize {
                    let yy = y as isize + i - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..3isize {
                        let xj = xx as isize + j - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        acc += K[i as usize] * K[j as usize] * input[yy as usize * w + xj as usize];
                    }
                }
                dst[y * w + xx] = if adjoint { acc } else { acc / mass(y, xx) };
            }
        }
    }
    out
}

fn nn_repeat2_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * 4 * h * w];
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * 4 * h * w;
        for y in 0..h {
            for xx in 0..w {
                let v = x[src + y * w + xx];
                let d0 = dst + (2 * y) * (2 * w) + 2 * xx;
                let d1 = dst + (2 * y + 1) * (2 * w) + 2 * xx;
                out[d0] = v;
                out[d0 + 1] = v;
                out[d1] = v;
                out[d1 + 1] = v;
            }
        }
    }
    out
}

fn block_sum2_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * oh * ow;
        for y in 0..oh {
            for xx in 0..ow {
                let s0 = src + (2 * y) * w + 2 * xx;
                let s1 = src + (2 * y + 1) * w + 2 * xx;
                out[dst + y * ow + xx] = x[s0] + x[s0 + 1] + x[s1] + x[s1 + 1];
            }
        }
    }
    out
}

fn decimate2_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * oh * ow;
        for y in 0..oh {
            for xx in 0..ow {
                out[dst + y * ow + xx] = x[src + (2 * y) * w + 2 * xx];
            }
        }
    }
    out
}

fn zero_stuff2_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * 4 * h * w];
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * 4 * h * w;
        for y in 0..h {
            for xx in 0..w {
                out[dst + (2 * y) * (2 * w) + 2 * xx] = x[src + y * w + xx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::gradcheck::{fd_check_scalar_fn, rel_err};
    use rand::Rng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        crate::rng::stream_rng(42, "tensor-tests")
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let out = t.matmul(i2, m).unwrap();
        assert_eq!(t.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_1x1() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]);
        let b = t.constant(vec![3.0, 4.0], vec![2, 1]);
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]);
        let b = t.constant(vec![0.0; 8], vec![4, 2]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut r = rng();
        let a0: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let max = fd_check_scalar_fn(&a0, 1e-6, |av, tape| {
            let a = tape.leaf(av.to_vec(), vec![3, 4], true);
            let b = tape.constant(b0.clone(), vec![4, 2]);
            let m = tape.matmul(a, b)?;
            Ok((tape.sum(m), a))
        })
        .unwrap();
        assert!(max < 1e-6, "matmul grad rel err {max}");
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut t = Tape::new();
        let x = t.constant((0..9).map(|v| v as f64).collect(), vec![1, 1, 3, 3]);
        let w = t.constant(vec![1.0], vec![1, 1, 1, 1]);
        let y = t.conv2d(x, w).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn conv2d_ones_kernel_padding_counts() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0; 9], vec![1, 1, 3, 3]);
        let w = t.constant(vec![1.0; 9], vec![1, 1, 3, 3]);
        let y = t.conv2d(x, w).unwrap();
        let d = t.data(y);
        assert_eq!(d[4], 9.0); // center sees the full window
        assert_eq!(d[0], 4.0); // corner sees a 2x2 window
        assert_eq!(d[1], 6.0); // edge sees a 2x3 window
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0; 2 * 9], vec![1, 2, 3, 3]);
        let w = t.constant(vec![0.0; 3 * 9], vec![1, 3, 3, 3]);
        assert!(matches!(t.conv2d(x, w), Err(Error::Dim(_))));
    }

    #[test]
    fn conv2d_weight_grad_matches_finite_differences() {
        let mut r = rng();
        let x0: Vec<f64> = (0..2 * 25).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..3 * 2 * 9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let max = fd_check_scalar_fn(&w0, 1e-5, |wv, tape| {
            let x = tape.constant(x0.clone(), vec![1, 2, 5, 5]);
            let w = tape.leaf(wv.to_vec(), vec![3, 2, 3, 3], true);
            let y = tape.conv2d(x, w)?;
            Ok((tape.sum(y), w))
        })
        .unwrap();
        assert!(max < 1e-5, "conv2d weight grad rel err {max}");
    }

    #[test]
    fn conv2d_input_grad_matches_finite_differences() {
        let mut r = rng();
        let x0: Vec<f64> = (0..2 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..2 * 2 * 9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let max = fd_check_scalar_fn(&x0, 1e-5, |xv, tape| {
            let x = tape.leaf(xv.to_vec(), vec![1, 2, 4, 4], true);
            let w = tape.constant(w0.clone(), vec![2, 2, 3, 3]);
            let y = tape.conv2d(x, w)?;
            // weight the output so the grad is not constant
            let coef: Vec<f64> = (0..t_len(&[1, 2, 4, 4])).map(|i| (i as f64 * 0.37).sin()).collect();
            let cw = tape.constant(coef, vec![1, 2, 4, 4]);
            let p = tape.mul(y, cw)?;
            Ok((tape.sum(p), x))
        })
        .unwrap();
        assert!(max < 1e-5, "conv2d input grad rel err {max}");
    }

    fn t_len(s: &[usize]) -> usize {
        s.iter().product()
    }

    #[test]
    fn leaky_relu_values_and_grad() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, -1.0], vec![2]);
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(t.data(y), &[1.0, -0.2]);

        let max = fd_check_scalar_fn(&[-3.0], 1e-6, |xv, tape| {
            let x = tape.leaf(xv.to_vec(), vec![1], true);
            let y = tape.leaky_relu(x, 0.2);
            Ok((tape.sum(y), x))
        })
        .unwrap();
        assert!(max < 1e-9, "leaky_relu grad at -3 rel err {max}");
    }

    #[test]
    fn resample_preserves_constants() {
        let mut t = Tape::new();
        let x = t.constant(vec![2.5; 16], vec![1, 1, 4, 4]);
        let up = t.resample_up2(x).unwrap();
        assert!(t.data(up).iter().all(|&v| (v - 2.5).abs() < 1e-12), "{:?}", t.data(up));
        let down = t.resample_down2(up).unwrap();
        assert!(t.data(down).iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert_eq!(t.shape(down), &[1, 1, 4, 4]);
    }

    #[test]
    fn resample_down_rejects_odd_extent() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0; 9], vec![1, 1, 3, 3]);
        assert!(matches!(t.resample_down2(x), Err(Error::Dim(_))));
    }

    #[test]
    fn resample_grads_match_finite_differences() {
        let mut r = rng();
        let x0: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        for dir_up in [true, false] {
            let max = fd_check_scalar_fn(&x0, 1e-6, |xv, tape| {
                let x = tape.leaf(xv.to_vec(), vec![1, 1, 4, 4], true);
                let y = if dir_up { tape.resample_up2(x)? } else { tape.resample_down2(x)? };
                let n = tape.data(y).len();
                let coef: Vec<f64> = (0..n).map(|i| (i as f64 * 0.13).cos()).collect();
                let shape = tape.shape(y).to_vec();
                let c = tape.constant(coef, shape);
                let p = tape.mul(y, c)?;
                Ok((tape.sum(p), x))
            })
            .unwrap();
            assert!(max < 1e-6, "resample (up={dir_up}) grad rel err {max}");
        }
    }

    #[test]
    fn smooth_adjointness() {
        // <S x, y> == <x, S^T y> for random x, y
        let mut r = rng();
        let x: Vec<f64> = (0..25).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..25).map(|_| r.gen_range(-1.0..1.0)).collect();
        let sx = smooth_raw(&x, (1, 1, 5, 5), false);
        let sty = smooth_raw(&y, (1, 1, 5, 5), true);
        let lhs: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn backward_square_sum() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0], vec![1], true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0], vec![1], true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn backward_smoke_conv_lrelu_finite() {
        let mut r = rng();
        let mut t = Tape::new();
        let x: Vec<f64> = (0..2 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..2 * 2 * 9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let xt = t.leaf(x, vec![1, 2, 4, 4], true);
        let wt = t.leaf(w, vec![2, 2, 3, 3], true);
        let y = t.conv2d(xt, wt).unwrap();
        let a = t.leaky_relu(y, 0.2);
        let loss = t.mean(a);
        t.backward(loss).unwrap();
        for g in [t.grad(xt).unwrap(), t.grad(wt).unwrap()] {
            assert!(g.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        // backward(a*L1 + b*L2) == a*backward(L1) + b*backward(L2)
        let mut r = rng();
        let x0: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (a, b) = (2.0, -3.0);

        let combined = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), vec![2, 3], true);
            let l1 = t.mean(x);
            let sq = t.mul(x, x).unwrap();
            let l2 = t.mean(sq);
            let l1s = t.scale(l1, a);
            let l2s = t.scale(l2, b);
            let loss = t.add(l1s, l2s).unwrap();
            t.backward(loss).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let separate = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), vec![2, 3], true);
            let l1 = t.mean(x);
            let sq = t.mul(x, x).unwrap();
            let l2 = t.mean(sq);
            t.backward(l1).unwrap();
            let g1 = t.grad(x).unwrap().to_vec();
            t.clear_grads();
            t.backward(l2).unwrap();
            let g2 = t.grad(x).unwrap().to_vec();
            g1.iter().zip(&g2).map(|(u, v)| a * u + b * v).collect::<Vec<_>>()
        };
        for (u, v) in combined.iter().zip(&separate) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let mut r = rng();
            let x: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..4 * 2 * 9).map(|_| r.gen_range(-1.0..1.0)).collect();
            let xt = t.leaf(x, vec![1, 2, 4, 4], false);
            let wt = t.leaf(w, vec![4, 2, 3, 3], false);
            let y = t.conv2d(xt, wt).unwrap();
            let u = t.resample_up2(y).unwrap();
            let a = t.leaky_relu(u, 0.2);
            t.data(a).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn backward_graph_matches_buffer_backward() {
        // d(sum(conv(x,w) through lrelu + down))/dx computed both ways
        let mut r = rng();
        let x0: Vec<f64> = (0..2 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..2 * 2 * 9).map(|_| r.gen_range(-1.0..1.0)).collect();

        let graph = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), vec![1, 2, 4, 4], true);
            let w = t.constant(w0.clone(), vec![2, 2, 3, 3]);
            let y = t.conv2d(x, w).unwrap();
            let a = t.leaky_relu(y, 0.2);
            let d = t.resample_down2(a).unwrap();
            let loss = t.sum(d);
            let g = t.backward_graph(loss, x).unwrap();
            t.data(g).to_vec()
        };
        let buffer = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), vec![1, 2, 4, 4], true);
            let w = t.constant(w0.clone(), vec![2, 2, 3, 3]);
            let y = t.conv2d(x, w).unwrap();
            let a = t.leaky_relu(y, 0.2);
            let d = t.resample_down2(a).unwrap();
            let loss = t.sum(d);
            t.backward(loss).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        for (u, v) in graph.iter().zip(&buffer) {
            assert!(rel_err(*u, *v) < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn double_backward_through_gradient_norm() {
        // penalty = sum((d sum(conv(x,w)) / dx)^2); check d penalty / d w by FD
        let mut r = rng();
        let x0: Vec<f64> = (0..2 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..2 * 2 * 9).map(|_| r.gen_range(-0.5..0.5)).collect();
        let max = fd_check_scalar_fn(&w0, 1e-5, |wv, tape| {
            let x = tape.leaf(x0.clone(), vec![1, 2, 4, 4], true);
            let w = tape.leaf(wv.to_vec(), vec![2, 2, 3, 3], true);
            let y = tape.conv2d(x, w)?;
            let a = tape.leaky_relu(y, 0.2);
            let s = tape.sum(a);
            let gx = tape.backward_graph(s, x)?;
            let sq = tape.mul(gx, gx)?;
            Ok((tape.sum(sq), w))
        })
        .unwrap();
        assert!(max < 1e-5, "double backward rel err {max}");
    }
}
