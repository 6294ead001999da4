use std::hash::{DefaultHasher, Hash, Hasher};

use super::tensor::numel;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Input,
    Param(ParamId),
    MatMul,
    AddBroadcast,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    Conv2d { stride: usize, pad: usize },
    Upsample2,
    AvgPool2,
    ConcatChannels,
    LayerNorm,
    Softmax,
    Attention { heads: usize },
    Patchify { patch: usize },
    Unpatchify { patch: usize },
    ReplaceToken { index: usize },
    Reshape,
    Sum,
    Mean,
    BceDice { w_bce: f64, w_dice: f64 },
    BceDiceLogits { w_bce: f64, w_dice: f64 },
    MaskedNmse,
    Mse,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul => "dense",
            Op::AddBroadcast => "add_broadcast",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2 => "upsample2",
            Op::AvgPool2 => "avg_pool2",
            Op::ConcatChannels => "concat",
            Op::LayerNorm => "layernorm",
            Op::Softmax => "softmax",
            Op::Attention { .. } => "attention",
            Op::Patchify { .. } => "patchify",
            Op::Unpatchify { .. } => "unpatchify",
            Op::ReplaceToken { .. } => "replace_token",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::BceDice { .. } => "bce_dice",
            Op::BceDiceLogits { .. } => "bce_dice_logits",
            Op::MaskedNmse => "masked_nmse",
            Op::Mse => "mse",
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    /// Forward intermediates reused by the backward rule (im2col buffers,
    /// normalized activations, attention probabilities).
    saved: Vec<T>,
}

/// Recorded evaluation: nodes are appended in evaluation order, so inputs
/// always precede their consumers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const BCE_CLAMP: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1.0;
const NMSE_GUARD: f64 = 1e-8;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `kind#index` label used in error messages.
    pub fn node_name(&self, v: Var) -> String {
        format!("{}#{}", self.nodes[v.0].op.name(), v.0)
    }

    /// Node kinds and input ids in topological order.
    pub fn describe(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes.iter().map(|n| (n.op.name(), n.inputs.iter().map(|v| v.0).collect())).collect()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<T>, saved: Vec<T>) -> Var {
        self.nodes.push(Node { op, inputs, value, saved });
        Var(self.nodes.len() - 1)
    }

    fn err(&self, op: &str, detail: impl Into<String>) -> Error {
        Error::shape(format!("{op}#{}", self.nodes.len()), detail)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, vec![], value, vec![])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(Op::Param(id), vec![], store.get(id).clone(), vec![])
    }

    /// `x[..., k] @ w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(self.err("dense", format!("cannot multiply {xs:?} by {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = numel(&xs) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::MatMul, vec![x, w], Tensor::new(shape, out)?, vec![]))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias, positional embeddings).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(self.err("add_broadcast", format!("{ys:?} does not broadcast to {xs:?}")));
        }
        let inner = numel(&ys);
        let yv = self.value(y).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + yv[i % inner])
            .collect();
        Ok(self.push(Op::AddBroadcast, vec![x, y], Tensor::new(xs, out)?, vec![]))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.err(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a, b], Tensor::new(shape, out)?, vec![]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul, a, b, |x, y| x * y)
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(T) -> T) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, vec![x], Tensor::new(shape, out).expect("same numel"), vec![])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        self.map(Op::Scale(factor), x, |v| v * f)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(Op::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(Op::Sigmoid, x, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    fn nchw(&self, op: &str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(self.err(op, format!("expected NCHW input, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// 2-D convolution with zero padding: `x[N,C,H,W]`, `w[O,C,KH,KW]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.nchw("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c {
            return Err(self.err("conv2d", format!("kernel {ws:?} incompatible with {c} input channels")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(self.err("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
        }
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(self.err("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{wd}")));
        }
        let geo = ConvGeometry::new(c, h, wd, kh, kw, stride, pad);
        let (rows, cols) = (geo.rows(), geo.cols());
        let mut saved = vec![T::zero(); n * rows * cols];
        let mut out = vec![T::zero(); n * o * cols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for s in 0..n {
            let colbuf = &mut saved[s * rows * cols..(s + 1) * rows * cols];
            geo.im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], colbuf);
            let y = &mut out[s * o * cols..(s + 1) * o * cols];
            for (oc, chunk) in y.chunks_mut(cols).enumerate() {
                chunk.fill(bv[oc]);
            }
            T::gemm(o, rows, cols, wv, (rows, 1), colbuf, (cols, 1), T::one(), y, (cols, 1));
        }
        let shape = vec![n, o, geo.out_h, geo.out_w];
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w, b], Tensor::new(shape, out)?, saved))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("upsample2", x)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[p * 4 * h * w + i * 2 * w + j] = xv[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(Op::Upsample2, vec![x], Tensor::new(vec![n, c, 2 * h, 2 * w], out)?, vec![]))
    }

    /// 2x2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(self.err("avg_pool2", format!("spatial dims {h}x{w} not divisible by 2")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = p * h * w + 2 * i * w + 2 * j;
                    out[p * oh * ow + i * ow + j] =
                        (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]) * quarter;
                }
            }
        }
        Ok(self.push(Op::AvgPool2, vec![x], Tensor::new(vec![n, c, oh, ow], out)?, vec![]))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.nchw("concat", a)?;
        let [nb, cb, hb, wb] = self.nchw("concat", b)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(self.err(
                "concat",
                format!("cannot concatenate {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&bv[s * cb * plane..(s + 1) * cb * plane]);
        }
        Ok(self.push(Op::ConcatChannels, vec![a, b], Tensor::new(vec![n, ca + cb, h, w], out)?, vec![]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| self.err("layernorm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(self.err("layernorm", format!("affine params must have shape [{d}]")));
        }
        let rows = numel(&xs) / d;
        let xv = self.value(x).data();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let inv_d = T::of(1.0 / d as f64);
        // saved: normalized values followed by one reciprocal std per row
        let mut saved = vec![T::zero(); rows * d + rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + T::of(eps)).sqrt();
            saved[rows * d + r] = rstd;
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                saved[r * d + j] = xhat;
                out[r * d + j] = xhat * g[j] + bta[j];
            }
        }
        Ok(self.push(Op::LayerNorm, vec![x, gamma, beta], Tensor::new(xs, out)?, saved))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| self.err("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        Ok(self.push(Op::Softmax, vec![x], Tensor::new(xs, out)?, vec![]))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[B, T, 3D]` holding queries, keys and values side by side;
    /// the result is the concatenated per-head context `[B, T, D]` (the
    /// output projection is a separate dense layer).
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(3) || heads == 0 || !(s[2] / 3).is_multiple_of(heads) {
            return Err(self.err("attention", format!("qkv shape {s:?} incompatible with {heads} heads")));
        }
        let (b, t, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qv = self.value(qkv).data();
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            let base = bi * t * 3 * d;
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    let q = &qv[base + i * 3 * d + h * dh..][..dh];
                    for j in 0..t {
                        let k = &qv[base + j * 3 * d + d + h * dh..][..dh];
                        p[i * t + j] = dot(q, k) * scale;
                    }
                    softmax_in_place(&mut p[i * t..(i + 1) * t]);
                    let o = &mut out[bi * t * d + i * d + h * dh..][..dh];
                    for j in 0..t {
                        let pij = p[i * t + j];
                        let v = &qv[base + j * 3 * d + 2 * d + h * dh..][..dh];
                        for (oe, &ve) in o.iter_mut().zip(v) {
                            *oe += pij * ve;
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Attention { heads }, vec![qkv], Tensor::new(vec![b, t, d], out)?, probs))
    }

    /// `[B, (1,) H, W]` frame to `[B, T, patch^2]` row-major non-overlapping tokens.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ok = (s.len() == 4 && s[1] == 1) || s.len() == 3;
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if !ok || patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(self.err("patchify", format!("cannot split {s:?} into {patch}x{patch} tokens")));
        }
        let b = s[0];
        let (th, tw) = (h / patch, w / patch);
        let pp = patch * patch;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * th * tw * pp];
        for bi in 0..b {
            for (tok, chunk) in out[bi * th * tw * pp..(bi + 1) * th * tw * pp].chunks_mut(pp).enumerate() {
                let (ty, tx) = (tok / tw, tok % tw);
                for i in 0..patch {
                    let src = bi * h * w + (ty * patch + i) * w + tx * patch;
                    chunk[i * patch..(i + 1) * patch].copy_from_slice(&xv[src..src + patch]);
                }
            }
        }
        Ok(self.push(Op::Patchify { patch }, vec![x], Tensor::new(vec![b, th * tw, pp], out)?, vec![]))
    }

    /// Inverse of [`Graph::patchify`], producing `[B, 1, height, width]`.
    pub fn unpatchify(&mut self, x: Var, patch: usize, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if patch == 0
            || s.len() != 3
            || s[2] != patch * patch
            || !height.is_multiple_of(patch)
            || !width.is_multiple_of(patch)
            || s[1] != (height / patch) * (width / patch)
        {
            return Err(self.err(
                "unpatchify",
                format!("{s:?} is not a {height}x{width} frame of {patch}x{patch} tokens"),
            ));
        }
        let b = s[0];
        let tw = width / patch;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * height * width];
        scatter_tokens(xv, &mut out, b, s[1], patch, tw, height, width);
        Ok(self.push(
            Op::Unpatchify { patch },
            vec![x],
            Tensor::new(vec![b, 1, height, width], out)?,
            vec![],
        ))
    }

    /// Copies `x[B, T, D]` with token `index` of every sample replaced by `mask[D]`.
    pub fn replace_token(&mut self, x: Var, mask: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] || self.shape(mask) != [s[2]] {
            return Err(self.err(
                "replace_token",
                format!("cannot place {:?} at token {index} of {s:?}", self.shape(mask)),
            ));
        }
        let (t, d) = (s[1], s[2]);
        let mut out = self.value(x).data().to_vec();
        let mv = self.value(mask).data();
        for bi in 0..s[0] {
            out[(bi * t + index) * d..(bi * t + index + 1) * d].copy_from_slice(mv);
        }
        Ok(self.push(Op::ReplaceToken { index }, vec![x, mask], Tensor::new(s, out)?, vec![]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(self.err("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let value = self.value(x).clone().reshaped(shape);
        Ok(self.push(Op::Reshape, vec![x], value, vec![]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Op::Sum, vec![x], Tensor::scalar(s), vec![])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        self.push(Op::Mean, vec![x], Tensor::scalar(s), vec![])
    }

    /// `w_bce * BCE(scores, target) + w_dice * (1 - soft Dice)`.
    ///
    /// `scores` are probabilities; they are clamped to `[1e-7, 1 - 1e-7]`
    /// inside the logarithms. The Dice term uses smoothing 1 and is computed
    /// over all elements. `target` is treated as a constant.
    pub fn bce_dice(&mut self, scores: Var, target: Var, w_bce: f64, w_dice: f64) -> Result<Var> {
        self.same_shape("bce_dice", scores, target)?;
        let loss = bce_dice_value(self.value(scores).data(), self.value(target).data(), w_bce, w_dice);
        Ok(self.push(Op::BceDice { w_bce, w_dice }, vec![scores, target], Tensor::scalar(T::of(loss)), vec![]))
    }

    /// [`Graph::bce_dice`] evaluated on `sigmoid(logits)`, with the
    /// cross-entropy written as `softplus(z) - t z`. Equal to the clamped form
    /// while `|z| < ln((1 - 1e-7) / 1e-7)`; beyond that it keeps a gradient of
    /// `sigmoid(z) - t`, so confidently wrong pixels still get corrected.
    pub fn bce_dice_logits(&mut self, logits: Var, target: Var, w_bce: f64, w_dice: f64) -> Result<Var> {
        self.same_shape("bce_dice_logits", logits, target)?;
        let (z, t) = (self.value(logits).data(), self.value(target).data());
        let n = z.len().max(1) as f64;
        let (mut bce, mut inter, mut total) = (0.0, 0.0, 0.0);
        let mut probs = Vec::with_capacity(z.len());
        for (&zv, &tv) in z.iter().zip(t) {
            let (zv, tv) = (zv.to_f64().unwrap(), tv.to_f64().unwrap());
            bce += zv.max(0.0) - tv * zv + (-zv.abs()).exp().ln_1p();
            let sv = stable_sigmoid(zv);
            inter += sv * tv;
            total += sv + tv;
            probs.push(T::of(sv));
        }
        let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH);
        let loss = w_bce * bce / n + w_dice * dice;
        Ok(self.push(
            Op::BceDiceLogits { w_bce, w_dice },
            vec![logits, target],
            Tensor::scalar(T::of(loss)),
            probs,
        ))
    }

    /// `Σ m (p - a)^2 / (Σ m a^2 + 1e-8)` over pixels with non-zero `mask`.
    /// `act` and `mask` are treated as constants.
    pub fn masked_nmse(&mut self, pred: Var, act: Var, mask: Var) -> Result<Var> {
        self.same_shape("masked_nmse", pred, act)?;
        self.same_shape("masked_nmse", pred, mask)?;
        let (p, a, m) = (self.value(pred).data(), self.value(act).data(), self.value(mask).data());
        if m.iter().all(|v| v.is_zero()) {
            return Err(Error::EmptyMask);
        }
        let (mut num, mut den) = (T::zero(), T::zero());
        for i in 0..p.len() {
            if !m[i].is_zero() {
                num += (p[i] - a[i]) * (p[i] - a[i]);
                den += a[i] * a[i];
            }
        }
        let loss = num / (den + T::of(NMSE_GUARD));
        Ok(self.push(Op::MaskedNmse, vec![pred, act, mask], Tensor::scalar(loss), vec![]))
    }

    /// Mean squared error; `target` is treated as a constant.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = T::of(p.len().max(1) as f64);
        let loss = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Op::Mse, vec![pred, target], Tensor::scalar(loss), vec![]))
    }

    /// Hash of every ReLU's on/off pattern. Two evaluations with equal
    /// signatures lie in the same piecewise-smooth region of the graph.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if node.op == Op::Relu {
                let input = &self.nodes[node.inputs[0].0].value;
                for v in input.data() {
                    (*v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let ins = &node.inputs;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul => {
                let (x, w) = (ins[0], ins[1]);
                let (k, n) = (shp(w)[0], shp(w)[1]);
                let m = val(x).len() / k.max(1);
                T::gemm(m, n, k, g, (n, 1), val(w), (1, n), T::one(), slot(grads, x, val(x).len()), (k, 1));
                T::gemm(k, m, n, val(x), (1, k), g, (n, 1), T::one(), slot(grads, w, k * n), (n, 1));
            }
            Op::AddBroadcast => {
                let (x, y) = (ins[0], ins[1]);
                add_into(slot(grads, x, g.len()), g);
                let inner = val(y).len();
                let gy = slot(grads, y, inner);
                for chunk in g.chunks(inner) {
                    add_into(gy, chunk);
                }
            }
            Op::Add => {
                add_into(slot(grads, ins[0], g.len()), g);
                add_into(slot(grads, ins[1], g.len()), g);
            }
            Op::Sub => {
                add_into(slot(grads, ins[0], g.len()), g);
                for (o, &v) in slot(grads, ins[1], g.len()).iter_mut().zip(g) {
                    *o -= v;
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                let (av, bv) = (val(a), val(b));
                for (i, o) in slot(grads, a, g.len()).iter_mut().enumerate() {
                    *o += g[i] * bv[i];
                }
                for (i, o) in slot(grads, b, g.len()).iter_mut().enumerate() {
                    *o += g[i] * av[i];
                }
            }
            Op::Scale(f) => {
                let f = T::of(*f);
                for (o, &v) in slot(grads, ins[0], g.len()).iter_mut().zip(g) {
                    *o += v * f;
                }
            }
            Op::Relu => {
                let xv = val(ins[0]);
                for (i, o) in slot(grads, ins[0], g.len()).iter_mut().enumerate() {
                    if xv[i] > T::zero() {
                        *o += g[i];
                    }
                }
            }
            Op::Sigmoid => {
                let y = node.value.data();
                for (i, o) in slot(grads, ins[0], g.len()).iter_mut().enumerate() {
                    *o += g[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let [n, c, h, wd] = [shp(x)[0], shp(x)[1], shp(x)[2], shp(x)[3]];
                let ws = shp(w);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let geo = ConvGeometry::new(c, h, wd, kh, kw, *stride, *pad);
                let (rows, cols) = (geo.rows(), geo.cols());
                {
                    let gb = slot(grads, b, o);
                    for s in 0..n {
                        for (oc, chunk) in g[s * o * cols..(s + 1) * o * cols].chunks(cols).enumerate() {
                            gb[oc] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                {
                    let gw = slot(grads, w, o * rows);
                    for s in 0..n {
                        let gy = &g[s * o * cols..(s + 1) * o * cols];
                        let colbuf = &node.saved[s * rows * cols..(s + 1) * rows * cols];
                        T::gemm(o, cols, rows, gy, (cols, 1), colbuf, (1, cols), T::one(), gw, (rows, 1));
                    }
                }
                let wv = val(w);
                let gx = slot(grads, x, n * c * h * wd);
                let mut gcols = vec![T::zero(); rows * cols];
                for s in 0..n {
                    let gy = &g[s * o * cols..(s + 1) * o * cols];
                    T::gemm(rows, o, cols, wv, (1, rows), gy, (cols, 1), T::zero(), &mut gcols, (cols, 1));
                    geo.col2im(&gcols, &mut gx[s * c * h * wd..(s + 1) * c * h * wd]);
                }
            }
            Op::Upsample2 => {
                let s = shp(ins[0]);
                let (h, w) = (s[2], s[3]);
                let gx = slot(grads, ins[0], val(ins[0]).len());
                for p in 0..s[0] * s[1] {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[p * h * w + (i / 2) * w + j / 2] += g[p * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
            }
            Op::AvgPool2 => {
                let s = shp(ins[0]);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let gx = slot(grads, ins[0], val(ins[0]).len());
                for p in 0..s[0] * s[1] {
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = g[p * oh * ow + i * ow + j] * quarter;
                            let base = p * h * w + 2 * i * w + 2 * j;
                            gx[base] += v;
                            gx[base + 1] += v;
                            gx[base + w] += v;
                            gx[base + w + 1] += v;
                        }
                    }
                }
            }
            Op::ConcatChannels => {
                let (a, b) = (ins[0], ins[1]);
                let sa = shp(a);
                let (n, ca, plane) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = shp(b)[1];
                {
                    let ga = slot(grads, a, n * ca * plane);
                    for s in 0..n {
                        let src = &g[s * (ca + cb) * plane..][..ca * plane];
                        add_into(&mut ga[s * ca * plane..(s + 1) * ca * plane], src);
                    }
                }
                let gb = slot(grads, b, n * cb * plane);
                for s in 0..n {
                    let src = &g[s * (ca + cb) * plane + ca * plane..][..cb * plane];
                    add_into(&mut gb[s * cb * plane..(s + 1) * cb * plane], src);
                }
            }
            Op::LayerNorm => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let d = shp(gamma)[0];
                let rows = val(x).len() / d;
                let (xhat, rstd) = node.saved.split_at(rows * d);
                let gv = val(gamma);
                {
                    let gg = slot(grads, gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                {
                    let gbt = slot(grads, beta, d);
                    for chunk in g.chunks(d) {
                        add_into(gbt, chunk);
                    }
                }
                let inv_d = T::of(1.0 / d as f64);
                let gx = slot(grads, x, rows * d);
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        mean_g += gh;
                        mean_gx += gh * xh[j];
                    }
                    mean_g *= inv_d;
                    mean_gx *= inv_d;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (gr[j] * gv[j] - mean_g - xh[j] * mean_gx);
                    }
                }
            }
            Op::Softmax => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let gx = slot(grads, ins[0], y.len());
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dotp = dot(yr, gr);
                    for j in 0..d {
                        gx[r * d + j] += yr[j] * (gr[j] - dotp);
                    }
                }
            }
            Op::Attention { heads } => {
                let s = shp(ins[0]);
                let (b, t, d) = (s[0], s[1], s[2] / 3);
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let qv = val(ins[0]);
                let gq = slot(grads, ins[0], qv.len());
                let mut dp = vec![T::zero(); t];
                for bi in 0..b {
                    let base = bi * t * 3 * d;
                    for h in 0..*heads {
                        let p = &node.saved[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        for i in 0..t {
                            let go = &g[bi * t * d + i * d + h * dh..][..dh];
                            for j in 0..t {
                                let v = &qv[base + j * 3 * d + 2 * d + h * dh..][..dh];
                                dp[j] = dot(go, v);
                                let pij = p[i * t + j];
                                let gv = &mut gq[base + j * 3 * d + 2 * d + h * dh..][..dh];
                                for (a, &ge) in gv.iter_mut().zip(go) {
                                    *a += pij * ge;
                                }
                            }
                            let pr = &p[i * t..(i + 1) * t];
                            let mix = dot(pr, &dp);
                            for j in 0..t {
                                let ds = pr[j] * (dp[j] - mix) * scale;
                                if ds.is_zero() {
                                    continue;
                                }
                                for e in 0..dh {
                                    let qi = qv[base + i * 3 * d + h * dh + e];
                                    let kj = qv[base + j * 3 * d + d + h * dh + e];
                                    gq[base + i * 3 * d + h * dh + e] += ds * kj;
                                    gq[base + j * 3 * d + d + h * dh + e] += ds * qi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Patchify { patch } => {
                let s = shp(ins[0]);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let gx = slot(grads, ins[0], val(ins[0]).len());
                let tokens = (h / patch) * (w / patch);
                let mut tmp = vec![T::zero(); gx.len()];
                scatter_tokens(g, &mut tmp, s[0], tokens, *patch, w / patch, h, w);
                add_into(gx, &tmp);
            }
            Op::Unpatchify { patch } => {
                let s = shp(ins[0]);
                let os = node.value.shape();
                let (h, w) = (os[2], os[3]);
                let (tw, pp) = (w / patch, patch * patch);
                let gx = slot(grads, ins[0], val(ins[0]).len());
                for bi in 0..s[0] {
                    for tok in 0..s[1] {
                        let (ty, tx) = (tok / tw, tok % tw);
                        for i in 0..*patch {
                            let src = bi * h * w + (ty * patch + i) * w + tx * patch;
                            let dst = (bi * s[1] + tok) * pp + i * patch;
                            add_into(&mut gx[dst..dst + patch], &g[src..src + patch]);
                        }
                    }
                }
            }
            Op::ReplaceToken { index } => {
                let s = shp(ins[0]);
                let (t, d) = (s[1], s[2]);
                {
                    let gx = slot(grads, ins[0], g.len());
                    for bi in 0..s[0] {
                        for tok in (0..t).filter(|&k| k != *index) {
                            let r = (bi * t + tok) * d;
                            add_into(&mut gx[r..r + d], &g[r..r + d]);
                        }
                    }
                }
                let gm = slot(grads, ins[1], d);
                for bi in 0..s[0] {
                    let r = (bi * t + index) * d;
                    add_into(gm, &g[r..r + d]);
                }
            }
            Op::Reshape => add_into(slot(grads, ins[0], g.len()), g),
            Op::Sum => {
                let n = val(ins[0]).len();
                for o in slot(grads, ins[0], n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean => {
                let n = val(ins[0]).len();
                let v = g[0] / T::of(n.max(1) as f64);
                for o in slot(grads, ins[0], n).iter_mut() {
                    *o += v;
                }
            }
            Op::BceDice { w_bce, w_dice } => {
                let (s, t) = (val(ins[0]), val(ins[1]));
                let gs = bce_dice_grad(s, t, *w_bce, *w_dice);
                for (o, v) in slot(grads, ins[0], s.len()).iter_mut().zip(gs) {
                    *o += g[0] * T::of(v);
                }
            }
            Op::BceDiceLogits { w_bce, w_dice } => {
                let (probs, t) = (&node.saved, val(ins[1]));
                let n = probs.len().max(1) as f64;
                let dice_grads = bce_dice_grad(probs, t, 0.0, *w_dice);
                let gz = slot(grads, ins[0], probs.len());
                for i in 0..probs.len() {
                    let (sv, tv) = (probs[i].to_f64().unwrap(), t[i].to_f64().unwrap());
                    let d = w_bce * (sv - tv) / n + dice_grads[i] * sv * (1.0 - sv);
                    gz[i] += g[0] * T::of(d);
                }
            }
            Op::MaskedNmse => {
                let (p, a, m) = (val(ins[0]), val(ins[1]), val(ins[2]));
                let mut den = T::zero();
                for i in 0..p.len() {
                    if !m[i].is_zero() {
                        den += a[i] * a[i];
                    }
                }
                let den = den + T::of(NMSE_GUARD);
                let two = T::of(2.0);
                for (i, o) in slot(grads, ins[0], p.len()).iter_mut().enumerate() {
                    if !m[i].is_zero() {
                        *o += g[0] * two * (p[i] - a[i]) / den;
                    }
                }
            }
            Op::Mse => {
                let (p, t) = (val(ins[0]), val(ins[1]));
                let f = T::of(2.0 / p.len().max(1) as f64);
                for (i, o) in slot(grads, ins[0], p.len()).iter_mut().enumerate() {
                    *o += g[0] * f * (p[i] - t[i]);
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Writes `[B, T, p^2]` tokens into a `[B, H, W]` raster.
#[allow(clippy::too_many_arguments)]
fn scatter_tokens<T: Scalar>(
    tokens: &[T],
    out: &mut [T],
    b: usize,
    count: usize,
    patch: usize,
    tiles_w: usize,
    h: usize,
    w: usize,
) {
    let pp = patch * patch;
    for bi in 0..b {
        for tok in 0..count {
            let (ty, tx) = (tok / tiles_w, tok % tiles_w);
            for i in 0..patch {
                let dst = bi * h * w + (ty * patch + i) * w + tx * patch;
                let src = (bi * count + tok) * pp + i * patch;
                out[dst..dst + patch].copy_from_slice(&tokens[src..src + patch]);
            }
        }
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_dice_value<T: Scalar>(s: &[T], t: &[T], w_bce: f64, w_dice: f64) -> f64 {
    let n = s.len().max(1) as f64;
    let (mut bce, mut inter, mut total) = (0.0, 0.0, 0.0);
    for (&sv, &tv) in s.iter().zip(t) {
        let (sv, tv) = (sv.to_f64().unwrap(), tv.to_f64().unwrap());
        let sc = sv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= tv * sc.ln() + (1.0 - tv) * (1.0 - sc).ln();
        inter += sv * tv;
        total += sv + tv;
    }
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH);
    w_bce * bce / n + w_dice * dice
}

fn bce_dice_grad<T: Scalar>(s: &[T], t: &[T], w_bce: f64, w_dice: f64) -> Vec<f64> {
    let n = s.len().max(1) as f64;
    let (mut inter, mut total) = (0.0, 0.0);
    for (&sv, &tv) in s.iter().zip(t) {
        let (sv, tv) = (sv.to_f64().unwrap(), tv.to_f64().unwrap());
        inter += sv * tv;
        total += sv + tv;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = total + DICE_SMOOTH;
    s.iter()
        .zip(t)
        .map(|(&sv, &tv)| {
            let (sv, tv) = (sv.to_f64().unwrap(), tv.to_f64().unwrap());
            let bce = if sv > BCE_CLAMP && sv < 1.0 - BCE_CLAMP {
                -(tv / sv - (1.0 - tv) / (1.0 - sv)) / n
            } else {
                0.0
            };
            let dice = -(2.0 * tv * den - num) / (den * den);
            w_bce * bce + w_dice * dice
        })
        .collect()
}

/// Parameter gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a node, if the node influences the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients aligned with `store`, summed over every use of a
    /// parameter in the graph; unused parameters get zeros.
    pub fn for_params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> =
            store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(Some(g))) = (&node.op, self.grads.get(i)) {
                add_into(&mut out[id.0], g);
            }
        }
        out
    }
}

/// Index arithmetic shared by the im2col forward and col2im backward passes.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        Self { c, h, w, kh, kw, stride, pad, out_h, out_w }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(row, oy, iy, ox_lo..ox_hi, ix_lo)` for every kernel tap and
    /// output row whose input row is inside the frame; `ix_lo` is the input
    /// column read at `ox_lo`.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, std::ops::Range<usize>, usize)) {
        let (s, p) = (self.stride, self.pad);
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let ox_lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
                    let ox_hi = if self.w + p > kj { ((self.w + p - kj - 1) / s + 1).min(self.out_w) } else { 0 };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let ix_lo = ox_lo * s + kj - p;
                        f(row, oy, (ch * self.h + iy as usize) * self.w, ox_lo..ox_hi, ix_lo);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        let (ncols, ow, s) = (self.cols(), self.out_w, self.stride);
        self.for_each_segment(|row, oy, in_row, ox, ix_lo| {
            let dst = &mut cols[row * ncols + oy * ow + ox.start..row * ncols + oy * ow + ox.end];
            if s == 1 {
                dst.copy_from_slice(&x[in_row + ix_lo..in_row + ix_lo + dst.len()]);
            } else {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = x[in_row + ix_lo + k * s];
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (ncols, ow, s) = (self.cols(), self.out_w, self.stride);
        self.for_each_segment(|row, oy, in_row, ox, ix_lo| {
            let src = &cols[row * ncols + oy * ow + ox.start..row * ncols + oy * ow + ox.end];
            for (k, &v) in src.iter().enumerate() {
                x[in_row + ix_lo + k * s] += v;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 3], vec![1.0, -2.0, 3.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.input(t(vec![3, 3], eye));
        let b = g.input(t(vec![3], vec![0.0; 3]));
        let y = g.matmul(x, w).unwrap();
        let y = g.add_broadcast(y, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn all_ones_conv_counts_in_frame_taps() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::filled(vec![1, 1, 5, 5], 1.0));
        let w = g.input(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[2], 6.0);
        assert_eq!(v[12], 9.0);
        assert_eq!(v[24], 4.0);
        let y2 = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y2), &[1, 1, 3, 3]);
        assert_eq!(g.value(y2).data()[4], 9.0);
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 3]));
        let w = g.input(Tensor::zeros(vec![4, 2]));
        match g.matmul(x, w) {
            Err(Error::Shape { node, .. }) => assert!(node.starts_with("dense#")),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 40.0]));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patchify_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 36).map(|i| i as f64).collect();
        let x = g.input(t(vec![2, 1, 6, 6], data.clone()));
        let p = g.patchify(x, 3).unwrap();
        assert_eq!(g.shape(p), &[2, 4, 9]);
        assert_eq!(&g.value(p).data()[9..12], &[3.0, 4.0, 5.0]);
        let back = g.unpatchify(p, 3, 6, 6).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::<f64>::new();
        let s = g.input(Tensor::filled(vec![4], 0.5));
        let tg = g.input(Tensor::filled(vec![4], 1.0));
        let l = g.bce_dice(s, tg, 1.0, 0.0).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logit_loss_matches_probability_loss() {
        let z = vec![-3.0, -0.5, 0.0, 1.2, 4.0, -8.0];
        let tv = vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let mut g = Graph::<f64>::new();
        let zl = g.input(t(vec![6], z.clone()));
        let tl = g.input(t(vec![6], tv.clone()));
        let s = g.sigmoid(zl);
        let a = g.bce_dice(s, tl, 1.0, 1.0).unwrap();
        let b = g.bce_dice_logits(zl, tl, 1.0, 1.0).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);

        // far past the clamp the probability form is flat, the logit form is not
        let mut g = Graph::<f64>::new();
        let zl = g.input(t(vec![1], vec![-40.0]));
        let tl = g.input(t(vec![1], vec![1.0]));
        let l = g.bce_dice_logits(zl, tl, 1.0, 1.0).unwrap();
        let gz = g.backward(l).unwrap().get(zl).unwrap()[0];
        assert!((gz + 1.0).abs() < 1e-9, "{gz}");
    }

    #[test]
    fn masked_nmse_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(vec![4], vec![0.2, 0.4, 0.6, 0.8]));
        let p = g.input(t(vec![4], vec![0.22, 0.44, 0.0, 0.88]));
        let m = g.input(t(vec![4], vec![1.0, 1.0, 0.0, 1.0]));
        let l = g.masked_nmse(p, a, m).unwrap();
        assert!((g.value(l).item() - 0.01).abs() < 1e-7);
        let same = g.masked_nmse(a, a, m).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let empty = g.input(Tensor::zeros(vec![4]));
        assert!(matches!(g.masked_nmse(p, a, empty), Err(Error::EmptyMask)));
    }
}
