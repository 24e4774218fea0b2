//! Reverse-mode differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so every operand of a node has a
//! smaller index than the node itself and a reverse sweep over the tape is a
//! valid topological replay. The op set is closed: exactly what the
//! segmentation network and its objective need.

pub(crate) mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pooling::{self, InstanceVector, PROB_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample {
        input: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    WeightedSum(Vec<(Var, S)>),
    Mul(Var, Var),
    Sum(Var),
    GmPool {
        input: Var,
        grad: Vec<f64>,
    },
    Positiveness {
        input: Var,
        grad: Vec<f64>,
    },
    RegionMean {
        input: Var,
        groups: Arc<RegionGroups>,
    },
    Bce {
        input: Var,
        label: u8,
    },
    SqDiff {
        input: Var,
        target: f64,
    },
}

/// Pixel-to-region assignment used to pool a map into region instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGroups {
    labels: Vec<u32>,
    sizes: Vec<usize>,
}

impl RegionGroups {
    pub fn new(labels: Vec<u32>, region_count: usize) -> Result<Self> {
        let mut sizes = vec![0usize; region_count];
        for &l in &labels {
            let slot = sizes
                .get_mut(l as usize)
                .ok_or_else(|| Error::invalid(format!("region label {l} >= {region_count}")))?;
            *slot += 1;
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("region without member pixels"));
        }
        Ok(Self { labels, sizes })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn region_count(&self) -> usize {
        self.sizes.len()
    }

    /// Mean of `values` within each region, accumulated in f64.
    pub fn means(&self, values: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.sizes.len()];
        for (&l, &v) in self.labels.iter().zip(values) {
            acc[l as usize] += v;
        }
        acc.iter().zip(&self.sizes).map(|(s, &n)| s / n as f64).collect()
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Recorded computation for one training context.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of the leaves that required them, as left by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad()
    }

    fn push(&mut self, mut value: Tensor<S>, op: Op<S>, operands: &[Var]) -> Var {
        let rg = operands.iter().any(|&v| self.requires_grad(v));
        value.set_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether a gradient
    /// is reported for it.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let rg = tensor.requires_grad();
        let mut t = tensor;
        t.set_requires_grad(rg);
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    /// Cross-correlation with zero padding. Kernel `[out_c, in_c, kh, kw]`,
    /// bias `[out_c]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw("conv2d")?;
        let (oc, ic, kh, kw) = self.value(kernel).nchw("conv2d kernel")?;
        if ic != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {ic}"),
            ));
        }
        if self.value(bias).len() != oc {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values for {oc} output channels", self.value(bias).len()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})"),
            ));
        }
        let geom = ConvGeom {
            in_c: c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![S::zero(); n * rows * p];
        let mut out = vec![S::zero(); n * oc * p];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        for i in 0..n {
            let col = &mut cols[i * rows * p..(i + 1) * rows * p];
            kernels::im2col(&geom, &x[i * c * h * w..(i + 1) * c * h * w], col);
            let o = &mut out[i * oc * p..(i + 1) * oc * p];
            for (ch, plane) in o.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = b[ch]);
            }
            S::gemm(oc, rows, p, S::one(), k, false, col, false, S::one(), o);
        }
        let value = Tensor::new(vec![n, oc, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            &[input, kernel, bias],
        ))
    }

    /// 2x2 max pooling with stride 2. Odd extents replicate the last
    /// row/column, so the output is `ceil(h/2) x ceil(w/2)`.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw("maxpool2x2")?;
        let (oh, ow) = (kernels::pooled(h), kernels::pooled(w));
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        kernels::maxpool2x2(n * c, h, w, self.value(input).data(), &mut out, &mut argmax);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v.max(S::zero())).collect();
        let value = Tensor::new(src.dims().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(src.dims().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(input), &[input])
    }

    /// Bilinear resize (align-corners) of the trailing two dims.
    pub fn upsample_bilinear(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let src = self.value(input);
        let dims = src.dims().to_vec();
        if dims.len() < 2 {
            return Err(Error::shape("upsample", format!("need rank >= 2, got {dims:?}")));
        }
        let (h, w) = src.spatial();
        if target_h < h || target_w < w {
            return Err(Error::shape(
                "upsample",
                format!("target {target_h}x{target_w} smaller than input {h}x{w}"),
            ));
        }
        let planes = src.len() / (h * w);
        let mut out = vec![S::zero(); planes * target_h * target_w];
        kernels::upsample_bilinear(planes, (h, w), (target_h, target_w), src.data(), &mut out);
        let mut new_dims = dims;
        let r = new_dims.len();
        new_dims[r - 2] = target_h;
        new_dims[r - 1] = target_w;
        let value = Tensor::new(new_dims, out)?;
        Ok(self.push(
            value,
            Op::Upsample {
                input,
                from: (h, w),
                to: (target_h, target_w),
            },
            &[input],
        ))
    }

    /// `Σ_j c_j · x_j` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum needs at least one term"))?;
        let dims = self.value(first.0).dims().to_vec();
        let mut acc = vec![0.0f64; self.value(first.0).len()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.dims() != dims.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{:?} vs {dims:?}", t.dims()),
                ));
            }
            let c = c.as_f64();
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += c * x.as_f64();
            }
        }
        let value = Tensor::new(dims, acc.into_iter().map(S::from_f64_lossy).collect())?;
        let operands: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(value, Op::WeightedSum(terms.to_vec()), &operands))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_sum(&[(a, S::one()), (b, S::one())])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.dims(), tb.dims())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.dims().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum_f64();
        self.push(Tensor::scalar(S::from_f64_lossy(s)), Op::Sum(input), &[input])
    }

    /// Generalized-mean pooling of every element of `input` into one bag
    /// probability.
    pub fn gm_pool(&mut self, input: Var, r: f64) -> Result<Var> {
        let raw = self.value(input).to_f64_vec();
        let iv = InstanceVector::new(raw.iter().copied())?;
        let bag = pooling::gm_pool(&iv, r)?;
        let mut grad = pooling::gm_pool_grad(&iv, r)?;
        mask_clamped(&raw, &mut grad);
        Ok(self.push(
            Tensor::scalar(S::from_f64_lossy(bag)),
            Op::GmPool { input, grad },
            &[input],
        ))
    }

    /// Mean instance probability (clamped like [`Tape::gm_pool`]).
    pub fn positiveness(&mut self, input: Var) -> Result<Var> {
        let raw = self.value(input).to_f64_vec();
        let iv = InstanceVector::new(raw.iter().copied())?;
        let v = pooling::positiveness(&iv);
        let mut grad = vec![1.0 / raw.len() as f64; raw.len()];
        mask_clamped(&raw, &mut grad);
        Ok(self.push(
            Tensor::scalar(S::from_f64_lossy(v)),
            Op::Positiveness { input, grad },
            &[input],
        ))
    }

    /// Averages a per-pixel map within each region, giving one instance per
    /// region (`[region_count]`).
    pub fn region_mean(&mut self, input: Var, groups: Arc<RegionGroups>) -> Result<Var> {
        let src = self.value(input);
        if src.len() != groups.labels.len() {
            return Err(Error::shape(
                "region_mean",
                format!("map has {} pixels, regions cover {}", src.len(), groups.labels.len()),
            ));
        }
        let means = groups.means(&src.to_f64_vec());
        let value = Tensor::from_f64(&[groups.region_count()], &means)?;
        Ok(self.push(value, Op::RegionMean { input, groups }, &[input]))
    }

    /// Negative log-likelihood of a bag probability for a binary label.
    pub fn bce(&mut self, input: Var, label: u8) -> Result<Var> {
        let p = scalar_of(self.value(input), "bce")?;
        let loss = crate::objective::mil_loss(label, p)?;
        Ok(self.push(
            Tensor::scalar(S::from_f64_lossy(loss)),
            Op::Bce { input, label },
            &[input],
        ))
    }

    /// `(x - target)^2` for a scalar `x`.
    pub fn sq_diff(&mut self, input: Var, target: f64) -> Result<Var> {
        let x = scalar_of(self.value(input), "sq_diff")?;
        let d = x - target;
        Ok(self.push(
            Tensor::scalar(S::from_f64_lossy(d * d)),
            Op::SqDiff { input, target },
            &[input],
        ))
    }

    /// Reverse sweep from a one-element `loss`. Returns gradients for every
    /// leaf that requires one and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must have one element, got dims {:?}", self.value(loss).dims()),
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }

        let grads = nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match (node.op, g) {
                (Op::Leaf, Some(g)) if node.value.requires_grad() => {
                    Some(Tensor::new(node.value.dims().to_vec(), g).expect("same shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn scalar_of<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::shape(op, format!("expected a scalar, got dims {:?}", t.dims())));
    }
    Ok(t.data()[0].as_f64())
}

fn mask_clamped(raw: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(raw) {
        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
            *g = 0.0;
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], v: Var) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].value.requires_grad() {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

fn propagate<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols,
        } => {
            let (n, oc) = (node.value.dims()[0], node.value.dims()[1]);
            let (rows, p) = (geom.col_rows(), geom.col_cols());
            let in_len = geom.in_c * geom.h * geom.w;
            if let Some(gb) = slot(grads, nodes, *bias) {
                for i in 0..n {
                    for ch in 0..oc {
                        let s: f64 = g[(i * oc + ch) * p..(i * oc + ch + 1) * p]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum();
                        gb[ch] += S::from_f64_lossy(s);
                    }
                }
            }
            if let Some(gk) = slot(grads, nodes, *kernel) {
                for i in 0..n {
                    S::gemm(
                        oc,
                        p,
                        rows,
                        S::one(),
                        &g[i * oc * p..(i + 1) * oc * p],
                        false,
                        &cols[i * rows * p..(i + 1) * rows * p],
                        true,
                        S::one(),
                        gk,
                    );
                }
            }
            if nodes[input.0].value.requires_grad() {
                let k = nodes[kernel.0].value.data();
                let mut dcols = vec![S::zero(); rows * p];
                let gx = slot(grads, nodes, *input).expect("requires grad");
                for i in 0..n {
                    S::gemm(
                        rows,
                        oc,
                        p,
                        S::one(),
                        k,
                        true,
                        &g[i * oc * p..(i + 1) * oc * p],
                        false,
                        S::zero(),
                        &mut dcols,
                    );
                    kernels::col2im(geom, &dcols, &mut gx[i * in_len..(i + 1) * in_len]);
                }
            }
        }
        Op::MaxPool2x2 { input, argmax } => {
            if let Some(gx) = slot(grads, nodes, *input) {
                for (&src, &go) in argmax.iter().zip(g) {
                    gx[src] += go;
                }
            }
        }
        Op::Relu(input) => {
            let x = nodes[input.0].value.data();
            if let Some(gx) = slot(grads, nodes, *input) {
                for ((acc, &xv), &go) in gx.iter_mut().zip(x).zip(g) {
                    if xv > S::zero() {
                        *acc += go;
                    }
                }
            }
        }
        Op::Sigmoid(input) => {
            let y = node.value.data();
            if let Some(gx) = slot(grads, nodes, *input) {
                for ((acc, &s), &go) in gx.iter_mut().zip(y).zip(g) {
                    *acc += go * s * (S::one() - s);
                }
            }
        }
        Op::Upsample { input, from, to } => {
            if let Some(gx) = slot(grads, nodes, *input) {
                let planes = gx.len() / (from.0 * from.1);
                kernels::upsample_bilinear_backward(planes, *from, *to, g, gx);
            }
        }
        Op::WeightedSum(terms) => {
            for &(v, c) in terms {
                if let Some(gx) = slot(grads, nodes, v) {
                    for (acc, &go) in gx.iter_mut().zip(g) {
                        *acc += c * go;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (nodes[a.0].value.data().to_vec(), nodes[b.0].value.data().to_vec());
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((acc, &y), &go) in ga.iter_mut().zip(&xb).zip(g) {
                    *acc += go * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((acc, &y), &go) in gb.iter_mut().zip(&xa).zip(g) {
                    *acc += go * y;
                }
            }
        }
        Op::Sum(input) => {
            if let Some(gx) = slot(grads, nodes, *input) {
                gx.iter_mut().for_each(|acc| *acc += g[0]);
            }
        }
        Op::GmPool { input, grad } | Op::Positiveness { input, grad } => {
            if let Some(gx) = slot(grads, nodes, *input) {
                let go = g[0].as_f64();
                for (acc, &d) in gx.iter_mut().zip(grad) {
                    *acc += S::from_f64_lossy(go * d);
                }
            }
        }
        Op::RegionMean { input, groups } => {
            if let Some(gx) = slot(grads, nodes, *input) {
                for (acc, &l) in gx.iter_mut().zip(&groups.labels) {
                    let l = l as usize;
                    *acc += S::from_f64_lossy(g[l].as_f64() / groups.sizes[l] as f64);
                }
            }
        }
        Op::Bce { input, label } => {
            let p = pooling::clamp_prob(nodes[input.0].value.data()[0].as_f64());
            let d = if *label == 1 { -1.0 / p } else { 1.0 / (1.0 - p) };
            if let Some(gx) = slot(grads, nodes, *input) {
                gx[0] += S::from_f64_lossy(g[0].as_f64() * d);
            }
        }
        Op::SqDiff { input, target } => {
            let x = nodes[input.0].value.data()[0].as_f64();
            if let Some(gx) = slot(grads, nodes, *input) {
                gx[0] += S::from_f64_lossy(g[0].as_f64() * 2.0 * (x - target));
            }
        }
    }
}

#[cfg(test)]
mod tests;
