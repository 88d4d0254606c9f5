//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Graph`] records every operation eagerly: each call computes the
//! forward value immediately and appends a node. [`Graph::backward`] then
//! walks the nodes in reverse and accumulates adjoints for every node that
//! depends on a variable leaf. Constant leaves (and everything computed only
//! from constants) receive no adjoint and cost nothing in the backward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pixel-to-patch mapping used by [`Graph::composite`]: one entry per
/// `(image, row, col)`, holding the patch pixel index or [`UNCOVERED`].
pub const UNCOVERED: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
    },
    Relu(NodeId),
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Reshape(NodeId),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    AddBroadcast {
        batch: NodeId,
        single: NodeId,
    },
    Clamp {
        input: NodeId,
        lo: f32,
        hi: f32,
    },
    SpatialMean(NodeId),
    SpatialStd(NodeId),
    Sum(NodeId),
    Composite {
        base: NodeId,
        patch: NodeId,
        map: Vec<u32>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-writer tape of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The adjoint of `node`, or `None` when the root does not depend on it
    /// through any variable.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.adjoints.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.adjoints.get_mut(node.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn requires_grad(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        Ok(self.push(op, value, requires_grad))
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf whose adjoint is computed by `backward`.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (x, k) = (self.value(input), self.value(kernel));
        let geometry = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [geometry.out_channels] {
                    return Err(Error::shape("conv2d bias", bt.shape(), &[geometry.out_channels]));
                }
                Some(bt.data())
            }
            None => None,
        };
        let mut out = Tensor::zeros(&geometry.output_shape());
        kernels::conv2d_forward(x.data(), k.data(), b, &geometry, out.data_mut());
        let mut ids = vec![input, kernel];
        ids.extend(bias);
        let rg = self.grad_of(&ids);
        self.push_checked(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            out,
            rg,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect()).expect("shape preserved");
        let rg = self.grad_of(&[x]);
        self.push(Op::Relu(x), out, rg)
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 4 || window == 0 || v.shape()[2] < window || v.shape()[3] < window {
            return Err(Error::shape("maxpool2d", v.shape(), &[window, window]));
        }
        let s = [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]];
        let mut out = Tensor::zeros(&[s[0], s[1], s[2] / window, s[3] / window]);
        let mut argmax = vec![0u32; out.len()];
        kernels::maxpool2d_forward(v.data(), s, window, out.data_mut(), Some(&mut argmax));
        let rg = self.grad_of(&[x]);
        Ok(self.push(Op::MaxPool2d { input: x, argmax }, out, rg))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = *v.shape().first().ok_or_else(|| Error::invalid("flatten of a scalar"))?;
        let f = v.len() / n.max(1);
        let out = v.clone().reshape(&[n, f])?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    /// `x[N, F] * weight[O, F]^T + bias[O]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape("dense", x.shape(), w.shape()));
        }
        let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [o] {
                    return Err(Error::shape("dense bias", bt.shape(), &[o]));
                }
                Some(bt.data())
            }
            None => None,
        };
        let mut out = Tensor::zeros(&[n, o]);
        kernels::dense_forward(x.data(), w.data(), b, n, f, o, out.data_mut());
        let mut ids = vec![input, weight];
        ids.extend(bias);
        let rg = self.grad_of(&ids);
        self.push_checked(Op::Dense { input, weight, bias }, out, rg, "dense")
    }

    /// Mean cross-entropy over the batch; returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rank() != 2 || v.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape("softmax_cross_entropy", v.shape(), &[labels.len()]));
        }
        let classes = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = kernels::softmax_cross_entropy(v.data(), labels, classes);
        let rg = self.grad_of(&[logits]);
        self.push_checked(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
            "softmax_cross_entropy",
        )
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        let rg = self.grad_of(&[a, b]);
        self.push_checked(Op::Add(a, b), out, rg, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        let rg = self.grad_of(&[a, b]);
        self.push_checked(Op::Sub(a, b), out, rg, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        let rg = self.grad_of(&[a, b]);
        self.push_checked(Op::Mul(a, b), out, rg, "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * factor).collect())?;
        let rg = self.grad_of(&[x]);
        self.push_checked(Op::Scale(x, factor), out, rg, "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: f32) -> Result<NodeId> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a + offset).collect())?;
        let rg = self.grad_of(&[x]);
        self.push_checked(Op::AddScalar(x), out, rg, "add_scalar")
    }

    /// Adds one `single` tensor to every item of `batch`. `single` must have
    /// the shape of `batch` without its leading axis (or with a leading 1).
    pub fn add_broadcast(&mut self, batch: NodeId, single: NodeId) -> Result<NodeId> {
        let (x, d) = (self.value(batch), self.value(single));
        let item = x.shape().get(1..).unwrap_or(&[]);
        let d_item = match d.shape() {
            [1, rest @ ..] if rest == item => rest,
            s => s,
        };
        if x.rank() == 0 || d_item != item {
            return Err(Error::shape("add_broadcast", x.shape(), d.shape()));
        }
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_exact_mut(d.len().max(1)) {
            chunk.iter_mut().zip(d.data()).for_each(|(v, a)| *v += a);
        }
        let rg = self.grad_of(&[batch, single]);
        self.push_checked(Op::AddBroadcast { batch, single }, out, rg, "add_broadcast")
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.clamp(lo, hi)).collect())
            .expect("shape preserved");
        let rg = self.grad_of(&[x]);
        self.push(Op::Clamp { input: x, lo, hi }, out, rg)
    }

    fn spatial_stats(&self, x: NodeId, op: &'static str) -> Result<(usize, usize, Tensor, Tensor)> {
        let v = self.value(x);
        if v.rank() != 4 || v.shape()[2] == 0 || v.shape()[3] == 0 {
            return Err(Error::shape(op, v.shape(), &[0, 0, 1, 1]));
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let plane = v.shape()[2] * v.shape()[3];
        let mut mean = Tensor::zeros(&[n, c]);
        let mut std = Tensor::zeros(&[n, c]);
        kernels::spatial_mean_std(v.data(), n * c, plane, mean.data_mut(), std.data_mut());
        Ok((n * c, plane, mean, std))
    }

    /// Per-channel mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, _, mean, _) = self.spatial_stats(x, "spatial_mean")?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Op::SpatialMean(x), mean, rg))
    }

    /// Per-channel population standard deviation over the spatial axes.
    /// Its gradient is defined as zero where the deviation is exactly zero.
    pub fn spatial_std(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, _, _, std) = self.spatial_stats(x, "spatial_std")?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Op::SpatialStd(x), std, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.grad_of(&[x]);
        self.push_checked(Op::Sum(x), Tensor::scalar(total as f32), rg, "sum")
    }

    /// Replaces pixels of `base[N, C, H, W]` with pixels of `patch[C, S, S]`
    /// according to `map` (length `N*H*W`, entries index the `S*S` patch
    /// grid or are [`UNCOVERED`]). Gradients flow to both operands.
    pub fn composite(&mut self, base: NodeId, patch: NodeId, map: Vec<u32>) -> Result<NodeId> {
        let (b, p) = (self.value(base), self.value(patch));
        if b.rank() != 4 || p.rank() != 3 || b.shape()[1] != p.shape()[0] {
            return Err(Error::shape("composite", b.shape(), p.shape()));
        }
        let [n, c, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2], b.shape()[3]];
        let patch_plane = p.shape()[1] * p.shape()[2];
        if map.len() != n * h * w || map.iter().any(|&m| m != UNCOVERED && m as usize >= patch_plane) {
            return Err(Error::shape("composite map", &[map.len()], &[n * h * w]));
        }
        let mut out = b.clone();
        let od = out.data_mut();
        for img in 0..n {
            let m = &map[img * h * w..(img + 1) * h * w];
            for ch in 0..c {
                let plane = &mut od[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                for (px, &idx) in m.iter().enumerate() {
                    if idx != UNCOVERED {
                        plane[px] = p.data()[ch * patch_plane + idx as usize];
                    }
                }
            }
        }
        let rg = self.grad_of(&[base, patch]);
        Ok(self.push(Op::Composite { base, patch, map }, out, rg))
    }

    /// Computes adjoints of the scalar `root` with respect to every node that
    /// depends on a variable leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { adjoints: adj });
        }
        adj[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj)?;
            adj[id] = Some(g);
        }
        for (a, node) in adj.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *a = None;
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let mut dx = self.wants(*input).then(|| Tensor::zeros(x.shape()));
                let mut dk = self.wants(*kernel).then(|| Tensor::zeros(k.shape()));
                let mut db = bias
                    .filter(|b| self.wants(*b))
                    .map(|b| Tensor::zeros(self.value(b).shape()));
                kernels::conv2d_backward(
                    x.data(),
                    k.data(),
                    geometry,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                accumulate(adj, *input, dx);
                accumulate(adj, *kernel, dk);
                if let Some(b) = bias {
                    accumulate(adj, *b, db);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(adj, *x, Some(Tensor::new(xv.shape().to_vec(), d)?));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.wants(*input) {
                    let mut d = Tensor::zeros(self.value(*input).shape());
                    let dd = d.data_mut();
                    for (&i, &gv) in argmax.iter().zip(gd) {
                        dd[i as usize] += gv;
                    }
                    accumulate(adj, *input, Some(d));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let d = g.clone().reshape(self.value(*x).shape())?;
                    accumulate(adj, *x, Some(d));
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let mut dx = self.wants(*input).then(|| Tensor::zeros(x.shape()));
                let mut dw = self.wants(*weight).then(|| Tensor::zeros(w.shape()));
                let mut db = bias.filter(|b| self.wants(*b)).map(|_| Tensor::zeros(&[o]));
                kernels::dense_backward(
                    x.data(),
                    w.data(),
                    n,
                    f,
                    o,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                accumulate(adj, *input, dx);
                accumulate(adj, *weight, dw);
                if let Some(b) = bias {
                    accumulate(adj, *b, db);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let classes = shape[1];
                    let scale = gd[0] / labels.len() as f32;
                    let mut d = probs.clone();
                    for (row, &label) in d.chunks_exact_mut(classes).zip(labels) {
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(adj, *logits, Some(Tensor::new(shape, d)?));
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(*x) {
                        accumulate(adj, *x, Some(g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, Some(g.clone()));
                }
                if self.wants(*b) {
                    let d = gd.iter().map(|v| -v).collect();
                    accumulate(adj, *b, Some(Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if self.wants(*x) {
                        let o = self.value(*other);
                        let d = gd.iter().zip(o.data()).map(|(g, v)| g * v).collect();
                        accumulate(adj, *x, Some(Tensor::new(g.shape().to_vec(), d)?));
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.wants(*x) {
                    let d = gd.iter().map(|v| v * factor).collect();
                    accumulate(adj, *x, Some(Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::AddScalar(x) => {
                if self.wants(*x) {
                    accumulate(adj, *x, Some(g.clone()));
                }
            }
            Op::AddBroadcast { batch, single } => {
                if self.wants(*batch) {
                    accumulate(adj, *batch, Some(g.clone()));
                }
                if self.wants(*single) {
                    let s = self.value(*single);
                    let mut d = Tensor::zeros(s.shape());
                    let dd = d.data_mut();
                    for chunk in gd.chunks_exact(s.len().max(1)) {
                        dd.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                    accumulate(adj, *single, Some(d));
                }
            }
            Op::Clamp { input, lo, hi } => {
                if self.wants(*input) {
                    let xv = self.value(*input);
                    let d = xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&a, &g)| if a >= *lo && a <= *hi { g } else { 0.0 })
                        .collect();
                    accumulate(adj, *input, Some(Tensor::new(xv.shape().to_vec(), d)?));
                }
            }
            Op::SpatialMean(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let plane = xv.shape()[2] * xv.shape()[3];
                    let inv = 1.0 / plane as f32;
                    let mut d = Tensor::zeros(xv.shape());
                    for (chunk, &gv) in d.data_mut().chunks_exact_mut(plane).zip(gd) {
                        chunk.fill(gv * inv);
                    }
                    accumulate(adj, *x, Some(d));
                }
            }
            Op::SpatialStd(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let plane = xv.shape()[2] * xv.shape()[3];
                    let mut d = Tensor::zeros(xv.shape());
                    for ((chunk, src), (&gv, &s)) in d
                        .data_mut()
                        .chunks_exact_mut(plane)
                        .zip(xv.data().chunks_exact(plane))
                        .zip(gd.iter().zip(node.value.data()))
                    {
                        if s == 0.0 {
                            continue;
                        }
                        let (mean, _) = kernels::plane_mean_std(src);
                        let coef = gv as f64 / (plane as f64 * s as f64);
                        for (o, &v) in chunk.iter_mut().zip(src) {
                            *o = ((v as f64 - mean) * coef) as f32;
                        }
                    }
                    accumulate(adj, *x, Some(d));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(adj, *x, Some(Tensor::full(self.value(*x).shape(), gd[0])));
                }
            }
            Op::Composite { base, patch, map } => {
                let b = self.value(*base);
                let [n, c, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2], b.shape()[3]];
                if self.wants(*base) {
                    let mut d = g.clone();
                    let dd = d.data_mut();
                    for img in 0..n {
                        let m = &map[img * h * w..(img + 1) * h * w];
                        for ch in 0..c {
                            let plane = &mut dd[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                            for (px, &idx) in m.iter().enumerate() {
                                if idx != UNCOVERED {
                                    plane[px] = 0.0;
                                }
                            }
                        }
                    }
                    accumulate(adj, *base, Some(d));
                }
                if self.wants(*patch) {
                    let p = self.value(*patch);
                    let patch_plane = p.shape()[1] * p.shape()[2];
                    let mut d = Tensor::zeros(p.shape());
                    let dd = d.data_mut();
                    for img in 0..n {
                        let m = &map[img * h * w..(img + 1) * h * w];
                        for ch in 0..c {
                            let plane = &gd[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                            for (px, &idx) in m.iter().enumerate() {
                                if idx != UNCOVERED {
                                    dd[ch * patch_plane + idx as usize] += plane[px];
                                }
                            }
                        }
                    }
                    accumulate(adj, *patch, Some(d));
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, delta: Option<Tensor>) {
    let Some(delta) = delta else { return };
    match &mut adj[id.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(-1.0));
        let y = g.relu(x);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(0.0));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros(&[2, 3]));
        let b = g.variable(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.variable(Tensor::scalar(5.0));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), Some(2.0));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(f32::MAX));
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn composite_replaces_pixels() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let patch = g.variable(Tensor::new(vec![1, 1, 1], vec![7.0]).unwrap());
        let out = g.composite(base, patch, vec![UNCOVERED, 0, 0, UNCOVERED]).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 7.0, 7.0, 0.0]);
        let s = g.sum(out).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(patch).unwrap().data(), &[2.0]);
    }
}
