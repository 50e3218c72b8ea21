//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records enough state to push gradients back to its inputs. Node indices
//! are a topological order by construction, so [`Graph::backward`] is a
//! single reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::gemm::{gemm, Layout};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_EPS: f64 = 1e-7;

/// Smoothing term in the soft-IoU denominator.
pub const IOU_EPS: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Convolution hyper-parameters. Padding is always "same": `dilation * (k - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub dilation: usize,
    pub stride: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            dilation: 1,
            stride: 1,
        }
    }
}

impl ConvOpts {
    pub fn dilated(dilation: usize) -> Self {
        Self {
            dilation,
            stride: 1,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            dilation: 1,
            stride,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detached,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        // im2col buffer; `None` for 1x1 stride-1 convolutions where it equals the input.
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Linear {
        terms: Vec<(Var, f64)>,
    },
    PixelCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftIou {
        probs: Var,
        target: Tensor,
    },
    BinaryCrossEntropy {
        logits: Var,
        target: Var,
    },
    ForegroundMax {
        probs: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.dilation * (self.k - 1) / 2
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// `acc = bias; acc += coef * x` for each term in order.
///
/// Shared by the recorded [`Graph::linear`] op and plain scalar arithmetic so
/// both produce identical bits.
pub fn linear_combination(bias: f64, terms: &[(f64, f64)]) -> f64 {
    let mut acc = bias;
    for &(x, coef) in terms {
        acc += coef * x;
    }
    acc
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Recorded computation. See the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant computed from other recorded values by a piecewise-constant
    /// rule (e.g. an argmax). No gradient flows through it, but its value is
    /// part of [`Graph::kink_signature`].
    pub fn detached(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Detached, false)
    }

    /// Leaf whose gradient is tracked and readable through [`Graph::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; `backward` accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id).value.clone();
        self.push(t, Op::Param(id), true)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, opts: ConvOpts) -> Result<Var> {
        let (c_in, h, w) = self
            .value(input)
            .chw()
            .ok_or_else(|| Error::shape("conv2d", format!("input must be [C,H,W], got {:?}", self.shape(input))))?;
        let (c_out, kc_in, k) = match self.shape(kernel) {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return Err(Error::shape("conv2d", format!("kernel must be square [Cout,Cin,k,k], got {s:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size {k} is even")));
        }
        if kc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {kc_in}"),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} != [{c_out}]", self.shape(bias))));
        }
        if opts.dilation == 0 || opts.stride == 0 {
            return Err(Error::InvalidArgument("conv2d dilation and stride must be positive".into()));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            dilation: opts.dilation,
            stride: opts.stride,
            h_out: (h - 1) / opts.stride + 1,
            w_out: (w - 1) / opts.stride + 1,
        };
        let x = self.value(input).data();
        let cols = if geom.is_pointwise() { None } else { Some(im2col(x, &geom)) };
        let p = geom.h_out * geom.w_out;
        let mut out = vec![0.0; c_out * p];
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(self.value(bias).data()[co]);
        }
        gemm(
            c_out,
            geom.rows(),
            p,
            self.value(kernel).data(),
            Layout::Normal,
            cols.as_deref().unwrap_or(x),
            Layout::Normal,
            1.0,
            &mut out,
        );
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid_scalar(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Softmax across the channel axis of a `[K,H,W]` tensor, per pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (k, h, w) = v
            .chw()
            .ok_or_else(|| Error::shape("softmax_channels", format!("expected [K,H,W], got {:?}", v.shape())))?;
        let data = softmax_chw(v.data(), k, h * w);
        let t = Tensor::new(vec![k, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxChannels(x), rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        let v = self.value(x);
        let (c, h, w) = v
            .chw()
            .ok_or_else(|| Error::shape("upsample_nearest", format!("expected [C,H,W], got {:?}", v.shape())))?;
        let (ho, wo) = (h * factor, w * factor);
        let src = v.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let srow = &src[(ch * h + y / factor) * w..][..w];
                let drow = &mut out[(ch * ho + y) * wo..][..wo];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample { input: x, factor }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (c, h, w) = v
            .chw()
            .ok_or_else(|| Error::shape("global_avg_pool", format!("expected [C,H,W], got {:?}", v.shape())))?;
        let hw = h * w;
        let data = v.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(vec![c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// `weight[m,n] * x[n] + bias[m]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = match self.shape(x) {
            &[n] => n,
            s => return Err(Error::shape("dense", format!("input must be a vector, got {s:?}"))),
        };
        let m = match self.shape(weight) {
            &[m, wn] if wn == n => m,
            s => return Err(Error::shape("dense", format!("weight {s:?} incompatible with input [{n}]"))),
        };
        if self.shape(bias) != [m] {
            return Err(Error::shape("dense", format!("bias {:?} != [{m}]", self.shape(bias))));
        }
        let mut out = self.value(bias).data().to_vec();
        gemm(
            m,
            n,
            1,
            self.value(weight).data(),
            Layout::Normal,
            self.value(x).data(),
            Layout::Normal,
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Tensor::from_vec(out), Op::Dense { input: x, weight, bias }, rg))
    }

    /// Stack `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels needs at least one input".into()))?;
        let (_, h, w) = self
            .value(first)
            .chw()
            .ok_or_else(|| Error::shape("concat_channels", format!("expected [C,H,W], got {:?}", self.shape(first))))?;
        let mut data = Vec::new();
        let mut c_total = 0;
        for &x in xs {
            match self.value(x).chw() {
                Some((c, hh, ww)) if hh == h && ww == w => {
                    c_total += c;
                    data.extend_from_slice(self.value(x).data());
                }
                _ => {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("{:?} does not match spatial size {h}x{w}", self.shape(x)),
                    ))
                }
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let t = Tensor::new(vec![c_total, h, w], data)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `bias + sum(coef * x)` over scalar inputs, evaluated by [`linear_combination`].
    pub fn linear(&mut self, bias: f64, terms: &[(Var, f64)]) -> Result<Var> {
        let mut vals = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::shape("linear", format!("term {:?} is not a scalar", self.shape(v))));
            }
            vals.push((self.value(v).item(), c));
        }
        let out = linear_combination(bias, &vals);
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Tensor::scalar(out),
            Op::Linear {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over pixels of `-ln(max(softmax(logits)[label], LOG_EPS))`.
    pub fn pixel_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (k, h, w) = v.chw().ok_or_else(|| {
            Error::shape("pixel_cross_entropy", format!("logits must be [K,H,W], got {:?}", v.shape()))
        })?;
        if k < 2 {
            return Err(Error::InvalidArgument(format!("pixel_cross_entropy needs K >= 2, got {k}")));
        }
        let n = h * w;
        if labels.len() != n {
            return Err(Error::shape(
                "pixel_cross_entropy",
                format!("mask has {} pixels, logits have {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("mask label {bad} out of range for K={k}")));
        }
        let probs = softmax_chw(v.data(), k, n);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(p, &l)| -probs[l * n + p].max(LOG_EPS).ln())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::PixelCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over ground-truth-present classes of `I_k / (U_k + IOU_EPS)`.
    pub fn soft_iou(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        self.check_chw("soft_iou", probs)?;
        if self.shape(probs) != target.shape() {
            return Err(Error::shape(
                "soft_iou",
                format!("probs {:?} vs target {:?}", self.shape(probs), target.shape()),
            ));
        }
        let (k, h, w) = target.chw().expect("checked");
        let stats = iou_stats(self.value(probs).data(), target.data(), k, h * w);
        let present: Vec<_> = stats.iter().filter(|s| s.target_sum > 0.0).collect();
        let value = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|s| s.inter / (s.union + IOU_EPS)).sum::<f64>() / present.len() as f64
        };
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftIou {
                probs,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// with probabilities clamped to `[LOG_EPS, 1 - LOG_EPS]`.
    ///
    /// The target may itself be differentiable. Range checks on the target
    /// live in the loss layer.
    pub fn binary_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        if self.shape(logits).len() != 1 {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("logits must be a vector, got {:?}", self.shape(logits)),
            ));
        }
        self.same_shape("binary_cross_entropy", logits, target)?;
        let z = self.value(logits).data();
        let t = self.value(target).data();
        let total: f64 = z.iter().zip(t).map(|(&z, &t)| bce_term(z, t)).sum();
        let rg = self.rg(logits) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(total / z.len() as f64),
            Op::BinaryCrossEntropy { logits, target },
            rg,
        ))
    }

    /// Per foreground channel (`1..K`) maximum over all pixels of a `[K,H,W]` map.
    pub fn foreground_max(&mut self, probs: Var) -> Result<Var> {
        let (k, h, w) = self.check_chw("foreground_max", probs)?;
        if k < 2 {
            return Err(Error::InvalidArgument("foreground_max needs K >= 2".into()));
        }
        let n = h * w;
        let data = self.value(probs).data();
        let mut out = Vec::with_capacity(k - 1);
        let mut argmax = Vec::with_capacity(k - 1);
        for ch in 1..k {
            let plane = &data[ch * n..(ch + 1) * n];
            let (i, &m) = plane
                .iter()
                .enumerate()
                .fold((0, &plane[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            out.push(m);
            argmax.push(i);
        }
        let rg = self.rg(probs);
        Ok(self.push(Tensor::from_vec(out), Op::ForegroundMax { probs, argmax }, rg))
    }

    fn check_chw(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v)
            .chw()
            .ok_or_else(|| Error::shape(op, format!("expected [C,H,W], got {:?}", self.shape(v))))
    }

    /// Fingerprint of every piecewise branch taken during the forward pass:
    /// relu activity, clamp hits and max selections. Two evaluations with the
    /// same fingerprint lie on the same smooth piece.
    ///
    /// Detached values are included, so a flip of a hard projection counts
    /// as a kink.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &a in self.value(*x).data() {
                        (a > 0.0).hash(&mut h);
                    }
                }
                Op::ForegroundMax { argmax, .. } => argmax.hash(&mut h),
                Op::Detached => {
                    for &a in node.value.data() {
                        a.to_bits().hash(&mut h);
                    }
                }
                Op::PixelCrossEntropy { labels, probs, .. } => {
                    let n = labels.len();
                    for (p, &l) in labels.iter().enumerate() {
                        (probs[l * n + p] < LOG_EPS).hash(&mut h);
                    }
                }
                Op::BinaryCrossEntropy { logits, .. } => {
                    for &z in self.value(*logits).data() {
                        let s = sigmoid_scalar(z);
                        (s < LOG_EPS || s > 1.0 - LOG_EPS).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from scalar `loss`, then adds every parameter leaf's
    /// gradient into `store` (`+=`).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_leaves(loss)?;
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                let p = store.get_mut(*id);
                if p.grad.len() != g.len() {
                    return Err(Error::shape("backward", format!("parameter {} changed shape", p.name)));
                }
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep from scalar `loss`, leaving gradients on the nodes only.
    pub fn backward_leaves(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its output gradient.
    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Detached | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let p = geom.h_out * geom.w_out;
                let rows = geom.rows();
                let x = cols.as_deref().unwrap_or_else(|| self.value(*input).data());
                if self.rg(*kernel) {
                    let mut dk = vec![0.0; geom.c_out * rows];
                    gemm(geom.c_out, p, rows, g, Layout::Normal, x, Layout::Transposed, 0.0, &mut dk);
                    out.push((*kernel, dk));
                }
                if self.rg(*bias) {
                    out.push((*bias, g.chunks(p).map(|r| r.iter().sum()).collect()));
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; rows * p];
                    gemm(
                        rows,
                        geom.c_out,
                        p,
                        self.value(*kernel).data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut dcols,
                    );
                    let dx = if geom.is_pointwise() { dcols } else { col2im(&dcols, geom) };
                    out.push((*input, dx));
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                out.push((*x, d));
            }
            Op::SoftmaxChannels(x) => {
                let (k, h, w) = node.value.chw().expect("chw");
                let n = h * w;
                let y = node.value.data();
                let mut d = vec![0.0; k * n];
                for p in 0..n {
                    let dot: f64 = (0..k).map(|c| g[c * n + p] * y[c * n + p]).sum();
                    for c in 0..k {
                        d[c * n + p] = y[c * n + p] * (g[c * n + p] - dot);
                    }
                }
                out.push((*x, d));
            }
            Op::Upsample { input, factor } => {
                let (c, h, w) = self.value(*input).chw().expect("chw");
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        let grow = &g[(ch * ho + y) * wo..][..wo];
                        let drow = &mut d[(ch * h + y / factor) * w..][..w];
                        for (xo, gv) in grow.iter().enumerate() {
                            drow[xo / factor] += gv;
                        }
                    }
                }
                out.push((*input, d));
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.value(*x).chw().expect("chw");
                let hw = h * w;
                let d = g
                    .iter()
                    .flat_map(|&gc| std::iter::repeat(gc / hw as f64).take(hw))
                    .collect();
                out.push((*x, d));
            }
            Op::Dense { input, weight, bias } => {
                let n = self.value(*input).len();
                let m = g.len();
                if self.rg(*weight) {
                    let xv = self.value(*input).data();
                    let mut dw = vec![0.0; m * n];
                    for (row, &gi) in dw.chunks_mut(n).zip(g) {
                        row.iter_mut().zip(xv).for_each(|(d, &xj)| *d = gi * xj);
                    }
                    out.push((*weight, dw));
                }
                if self.rg(*bias) {
                    out.push((*bias, g.to_vec()));
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; n];
                    gemm(
                        n,
                        m,
                        1,
                        self.value(*weight).data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut dx,
                    );
                    out.push((*input, dx));
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if self.rg(x) {
                        out.push((x, g[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        out.push((*v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Sum(x) => {
                out.push((*x, vec![g[0]; self.value(*x).len()]));
            }
            Op::Linear { terms } => {
                for &(v, c) in terms {
                    if self.rg(v) {
                        out.push((v, vec![g[0] * c]));
                    }
                }
            }
            Op::PixelCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d = vec![0.0; k * n];
                for (p, &l) in labels.iter().enumerate() {
                    if probs[l * n + p] < LOG_EPS {
                        continue;
                    }
                    for c in 0..k {
                        let onehot = if c == l { 1.0 } else { 0.0 };
                        d[c * n + p] = scale * (probs[c * n + p] - onehot);
                    }
                }
                out.push((*logits, d));
            }
            Op::SoftIou { probs, target } => {
                let (k, h, w) = target.chw().expect("chw");
                let n = h * w;
                let p = self.value(*probs).data();
                let y = target.data();
                let stats = iou_stats(p, y, k, n);
                let present = stats.iter().filter(|s| s.target_sum > 0.0).count();
                let mut d = vec![0.0; k * n];
                if present > 0 {
                    let scale = g[0] / present as f64;
                    for (c, s) in stats.iter().enumerate() {
                        if s.target_sum <= 0.0 {
                            continue;
                        }
                        let den = s.union + IOU_EPS;
                        for q in 0..n {
                            let yv = y[c * n + q];
                            d[c * n + q] = scale * (yv * den - s.inter * (1.0 - yv)) / (den * den);
                        }
                    }
                }
                out.push((*probs, d));
            }
            Op::BinaryCrossEntropy { logits, target } => {
                let z = self.value(*logits).data();
                let t = self.value(*target).data();
                let scale = g[0] / z.len() as f64;
                if self.rg(*logits) {
                    let d = z
                        .iter()
                        .zip(t)
                        .map(|(&z, &t)| {
                            let s = sigmoid_scalar(z);
                            if (LOG_EPS..=1.0 - LOG_EPS).contains(&s) {
                                scale * (s - t)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    out.push((*logits, d));
                }
                if self.rg(*target) {
                    let d = z
                        .iter()
                        .map(|&z| {
                            let s = sigmoid_scalar(z).clamp(LOG_EPS, 1.0 - LOG_EPS);
                            -scale * (s.ln() - (1.0 - s).ln())
                        })
                        .collect();
                    out.push((*target, d));
                }
            }
            Op::ForegroundMax { probs, argmax } => {
                let (k, h, w) = self.value(*probs).chw().expect("chw");
                let n = h * w;
                let mut d = vec![0.0; k * n];
                for (j, &i) in argmax.iter().enumerate() {
                    d[(j + 1) * n + i] += g[j];
                }
                out.push((*probs, d));
            }
        }
        out
    }
}

/// One BCE term with the probability clamp applied.
pub fn bce_term(z: f64, t: f64) -> f64 {
    let s = sigmoid_scalar(z).clamp(LOG_EPS, 1.0 - LOG_EPS);
    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
}

/// Channel softmax of a `[K, N]` block (N pixels).
fn softmax_chw(x: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..n {
        let m = (0..k).map(|c| x[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = (x[c * n + p] - m).exp();
            out[c * n + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + p] /= z;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct IouStat {
    inter: f64,
    union: f64,
    target_sum: f64,
}

fn iou_stats(p: &[f64], y: &[f64], k: usize, n: usize) -> Vec<IouStat> {
    (0..k)
        .map(|c| {
            let (pc, yc) = (&p[c * n..(c + 1) * n], &y[c * n..(c + 1) * n]);
            let inter: f64 = pc.iter().zip(yc).map(|(a, b)| a * b).sum();
            let psum: f64 = pc.iter().sum();
            let ysum: f64 = yc.iter().sum();
            IouStat {
                inter,
                union: psum + ysum - inter,
                target_sum: ysum,
            }
        })
        .collect()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let pad = g.pad() as isize;
    let mut cols = vec![0.0; g.rows() * p];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let pad = g.pad() as isize;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += row[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
