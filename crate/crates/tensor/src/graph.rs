//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so a reverse scan of the node list
//! is a valid backward schedule. A [`Graph`] lives on one thread; values are
//! plain [`Tensor`]s and can leave the graph freely.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, GroupStats};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, E),
    Silu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Bilinear { input: NodeId },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    ConcatChannels(NodeId, NodeId),
    ChannelShift { input: NodeId, shift: NodeId },
    GroupNorm { input: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: GroupStats<E> },
    Attention { q: NodeId, k: NodeId, v: NodeId, probs: Vec<E> },
    /// Swap the last two axes of a rank-3 view `(n, rows, cols)`.
    TransposeLast2 { input: NodeId, n: usize, rows: usize, cols: usize },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Operation recorder. Create one per forward/backward pass.
pub struct Graph<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded in a [`Graph`].
pub struct Var<'g, E: Element> {
    graph: &'g Graph<E>,
    id: NodeId,
}

impl<E: Element> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<E: Element> Copy for Var<'_, E> {}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients<E: Element> {
    by_node: HashMap<NodeId, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: &Var<'_, E>) -> Option<&Tensor<E>> {
        self.by_node.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn check_finite<E: Element>(op: &'static str, data: &[E]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::invalid(format!("{op}: expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drop every recorded node. Requires that no [`Var`] is alive.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: NodeId) -> Tensor<E> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Record a computed result, rejecting non-finite values.
    fn record(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<E>, op: Op<E>, inputs: &[NodeId]) -> Result<Var<'_, E>> {
        check_finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Disconnected);
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![E::one()]);

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(grad);
                continue;
            }
            for (input, g) in self.vjp(&nodes, node, &grad) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let by_node = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                let g = g?;
                let node = &nodes[id];
                matches!(node.op, Op::Leaf).then(|| (id, Tensor::from_parts(node.value.shape().to_vec(), g)))
            })
            .collect();
        Ok(Gradients { by_node })
    }

    /// Vector-Jacobian product of one node: `(input id, grad)` pairs.
    fn vjp(&self, nodes: &[Node<E>], node: &Node<E>, g: &[E]) -> Vec<(NodeId, Vec<E>)> {
        let val = |id: NodeId| nodes[id].value.data();
        let shape = |id: NodeId| nodes[id].value.shape();
        let want = |id: NodeId| nodes[id].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&v| v * *s).collect())],
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * (s + x * s * (E::one() - s))
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / E::from_usize(n).unwrap(); n])]
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let grads = kernels::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    geom,
                    (want(*input), want(*weight), bias.is_some_and(want)),
                );
                let mut out = Vec::new();
                if let Some(d) = grads.input {
                    out.push((*input, d));
                }
                if let Some(d) = grads.weight {
                    out.push((*weight, d));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
                out
            }
            Op::Linear { input, weight, bias } => {
                let (fan_out, fan_in) = (shape(*weight)[0], shape(*weight)[1]);
                let rows = val(*input).len() / fan_in;
                let (dx, dw, db) = kernels::linear_backward(
                    val(*input),
                    val(*weight),
                    g,
                    rows,
                    fan_in,
                    fan_out,
                    (want(*input), want(*weight), bias.is_some_and(want)),
                );
                let mut out = Vec::new();
                if let Some(d) = dx {
                    out.push((*input, d));
                }
                if let Some(d) = dw {
                    out.push((*weight, d));
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    out.push((*b, d));
                }
                out
            }
            Op::Bilinear { input } => {
                let s = shape(*input);
                let planes = s[0] * s[1];
                let out_shape = node.value.shape();
                let d = kernels::bilinear_backward(g, planes, (s[2], s[3]), (out_shape[2], out_shape[3]));
                vec![(*input, d)]
            }
            Op::AvgPool2(a) => {
                let s = shape(*a);
                vec![(*a, kernels::avg_pool2_backward(g, s[0] * s[1], s[2], s[3]))]
            }
            Op::Upsample2(a) => {
                let s = shape(*a);
                vec![(*a, kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3]))]
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (shape(*a), shape(*b));
                let (ga, gb) = kernels::split_channels(g, sa[0], sa[1], sb[1], sa[2] * sa[3]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::ChannelShift { input, shift } => {
                let s = shape(*input);
                let hw = s[2] * s[3];
                let ds = g.chunks(hw).map(|plane| plane.iter().copied().sum()).collect();
                vec![(*input, g.to_vec()), (*shift, ds)]
            }
            Op::GroupNorm { input, gamma, beta, groups, stats } => {
                let s = shape(*input);
                let (dx, dg, db) = kernels::group_norm_backward(
                    val(*input),
                    val(*gamma),
                    g,
                    stats,
                    (s[0], s[1], s[2] * s[3]),
                    *groups,
                );
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Attention { q, k, v, probs } => {
                let (sq, sv) = (shape(*q), shape(*v));
                let dims = (sq[0], sq[1], sv[1], sq[2], sv[2]);
                let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, dims);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::TransposeLast2 { input, n, rows, cols } => {
                vec![(*input, kernels::transpose_last2(g, *n, *cols, *rows))]
            }
        }
    }
}

impl<'g, E: Element> Var<'g, E> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn value(&self) -> Tensor<E> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn same_graph(&self, other: &Var<'g, E>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn binary(
        self,
        other: Var<'g, E>,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: fn(NodeId, NodeId) -> Op<E>,
    ) -> Result<Var<'g, E>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        a.expect_same_shape(name, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.graph
            .record(name, a.shape().to_vec(), data, op(self.id, other.id), &[self.id, other.id])
    }

    fn unary(self, name: &'static str, shape: Vec<usize>, data: Vec<E>, op: Op<E>) -> Result<Var<'g, E>> {
        self.graph.record(name, shape, data, op, &[self.id])
    }

    pub fn add(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(self, s: E) -> Result<Var<'g, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x + s).collect();
        self.unary("add_scalar", a.shape().to_vec(), data, Op::AddScalar(self.id))
    }

    pub fn scale(self, s: E) -> Result<Var<'g, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * s).collect();
        self.unary("scale", a.shape().to_vec(), data, Op::Scale(self.id, s))
    }

    pub fn silu(self) -> Result<Var<'g, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * kernels::sigmoid(x)).collect();
        self.unary("silu", a.shape().to_vec(), data, Op::Silu(self.id))
    }

    pub fn square(self) -> Result<Var<'g, E>> {
        self.mul(self)
    }

    pub fn sum(self) -> Result<Var<'g, E>> {
        let s = self.value().sum();
        self.unary("sum", vec![], vec![s], Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'g, E>> {
        let m = self.value().mean();
        self.unary("mean", vec![], vec![m], Op::Mean(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, E>> {
        let r = self.value().reshape(shape)?;
        let shape = r.shape().to_vec();
        self.unary("reshape", shape, r.into_vec(), Op::Reshape(self.id))
    }

    /// 2-D convolution, stride 1. `self` is NCHW, `weight` OIHW.
    pub fn conv2d(self, weight: Var<'g, E>, bias: Option<Var<'g, E>>, pad: usize) -> Result<Var<'g, E>> {
        self.same_graph(&weight);
        let (x, w) = (self.value(), weight.value());
        expect_rank("conv2d", x.shape(), 4)?;
        expect_rank("conv2d", w.shape(), 4)?;
        let (xs, ws) = (x.shape(), w.shape());
        let (kh, kw) = (ws[2], ws[3]);
        if !matches!((kh, kw), (1, 1) | (3, 3)) {
            return Err(TensorError::UnsupportedKernel(kh, kw));
        }
        if pad > 1 {
            return Err(TensorError::invalid(format!("conv2d: pad must be 0 or 1, got {pad}")));
        }
        if ws[1] != xs[1] {
            return Err(TensorError::ChannelMismatch { op: "conv2d", expected: ws[1], got: xs[1] });
        }
        if xs[2] + 2 * pad < kh || xs[3] + 2 * pad < kw {
            return Err(TensorError::invalid(format!("conv2d: input {xs:?} smaller than kernel")));
        }
        let b = match bias {
            Some(b) => {
                self.same_graph(&b);
                let bv = b.value();
                if bv.shape() != [ws[0]] {
                    return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: bv.shape().to_vec(), rhs: vec![ws[0]] });
                }
                Some(bv)
            }
            None => None,
        };
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], kh, kw, pad };
        let out = kernels::conv2d_forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), &geom);
        let shape = vec![geom.n, geom.o, geom.out_h(), geom.out_w()];
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        self.graph.record(
            "conv2d",
            shape,
            out,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), geom },
            &inputs,
        )
    }

    /// `self (.., in) @ weight^T + bias`, `weight` stored `(out, in)`.
    pub fn linear(self, weight: Var<'g, E>, bias: Option<Var<'g, E>>) -> Result<Var<'g, E>> {
        self.same_graph(&weight);
        let (x, w) = (self.value(), weight.value());
        expect_rank("linear weight", w.shape(), 2)?;
        let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
        if x.shape().last() != Some(&fan_in) {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
        }
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [fan_out] {
                return Err(TensorError::ShapeMismatch { op: "linear bias", lhs: b.shape().to_vec(), rhs: vec![fan_out] });
            }
        }
        let rows = x.numel() / fan_in;
        let out = kernels::linear_forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), rows, fan_in, fan_out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        self.graph.record(
            "linear",
            shape,
            out,
            Op::Linear { input: self.id, weight: weight.id, bias: bias.map(|b| b.id) },
            &inputs,
        )
    }

    /// Align-corners bilinear resize of an NCHW tensor.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'g, E>> {
        let x = self.value();
        expect_rank("bilinear_resize", x.shape(), 4)?;
        let s = x.shape();
        if x.numel() == 0 {
            return Err(TensorError::invalid("bilinear_resize: zero-sized input"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid("bilinear_resize: zero-sized output"));
        }
        let out = kernels::bilinear_forward(x.data(), s[0] * s[1], (s[2], s[3]), (out_h, out_w));
        self.unary("bilinear_resize", vec![s[0], s[1], out_h, out_w], out, Op::Bilinear { input: self.id })
    }

    /// 2x2 average pooling of an NCHW tensor with even spatial dims.
    pub fn avg_pool2(self) -> Result<Var<'g, E>> {
        let x = self.value();
        expect_rank("avg_pool2", x.shape(), 4)?;
        let s = x.shape();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::invalid(format!("avg_pool2: odd spatial dims {s:?}")));
        }
        let out = kernels::avg_pool2_forward(x.data(), s[0] * s[1], s[2], s[3]);
        self.unary("avg_pool2", vec![s[0], s[1], s[2] / 2, s[3] / 2], out, Op::AvgPool2(self.id))
    }

    /// 2x nearest-neighbour upsampling of an NCHW tensor.
    pub fn upsample2(self) -> Result<Var<'g, E>> {
        let x = self.value();
        expect_rank("upsample2", x.shape(), 4)?;
        let s = x.shape();
        let out = kernels::upsample2_forward(x.data(), s[0] * s[1], s[2], s[3]);
        self.unary("upsample2", vec![s[0], s[1], s[2] * 2, s[3] * 2], out, Op::Upsample2(self.id))
    }

    /// Channel-wise concatenation `[self, other]` of NCHW tensors.
    pub fn concat_channels(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        expect_rank("concat_channels", a.shape(), 4)?;
        expect_rank("concat_channels", b.shape(), 4)?;
        let (sa, sb) = (a.shape(), b.shape());
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let out = kernels::concat_channels(a.data(), b.data(), sa[0], sa[1], sb[1], sa[2] * sa[3]);
        self.graph.record(
            "concat_channels",
            vec![sa[0], sa[1] + sb[1], sa[2], sa[3]],
            out,
            Op::ConcatChannels(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Add a per-(sample, channel) offset `shift (N, C)` to an NCHW tensor.
    pub fn channel_shift(self, shift: Var<'g, E>) -> Result<Var<'g, E>> {
        self.same_graph(&shift);
        let (x, s) = (self.value(), shift.value());
        expect_rank("channel_shift", x.shape(), 4)?;
        let xs = x.shape();
        if s.shape() != [xs[0], xs[1]] {
            return Err(TensorError::ShapeMismatch { op: "channel_shift", lhs: xs.to_vec(), rhs: s.shape().to_vec() });
        }
        let hw = xs[2] * xs[3];
        let mut out = x.data().to_vec();
        for (plane, &off) in out.chunks_mut(hw).zip(s.data()) {
            plane.iter_mut().for_each(|v| *v = *v + off);
        }
        self.graph.record(
            "channel_shift",
            xs.to_vec(),
            out,
            Op::ChannelShift { input: self.id, shift: shift.id },
            &[self.id, shift.id],
        )
    }

    pub fn group_norm(self, gamma: Var<'g, E>, beta: Var<'g, E>, groups: usize, eps: f64) -> Result<Var<'g, E>> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        expect_rank("group_norm", x.shape(), 4)?;
        let s = x.shape();
        if groups == 0 || s[1] % groups != 0 {
            return Err(TensorError::invalid(format!("group_norm: {} channels not divisible into {groups} groups", s[1])));
        }
        if gm.shape() != [s[1]] || bt.shape() != [s[1]] {
            return Err(TensorError::ShapeMismatch { op: "group_norm affine", lhs: gm.shape().to_vec(), rhs: vec![s[1]] });
        }
        let (y, stats) = kernels::group_norm_forward(x.data(), gm.data(), bt.data(), (s[0], s[1], s[2] * s[3]), groups, eps);
        self.graph.record(
            "group_norm",
            s.to_vec(),
            y,
            Op::GroupNorm { input: self.id, gamma: gamma.id, beta: beta.id, groups, stats },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// `(N, C, H, W) -> (N, H*W, C)` token layout.
    pub fn to_tokens(self) -> Result<Var<'g, E>> {
        let x = self.value();
        expect_rank("to_tokens", x.shape(), 4)?;
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out = kernels::transpose_last2(x.data(), n, c, hw);
        self.unary("to_tokens", vec![n, hw, c], out, Op::TransposeLast2 { input: self.id, n, rows: c, cols: hw })
    }

    /// `(N, H*W, C) -> (N, C, H, W)`.
    pub fn from_tokens(self, h: usize, w: usize) -> Result<Var<'g, E>> {
        let x = self.value();
        expect_rank("from_tokens", x.shape(), 3)?;
        let s = x.shape();
        if s[1] != h * w {
            return Err(TensorError::invalid(format!("from_tokens: {} tokens cannot form {h}x{w}", s[1])));
        }
        let (n, c) = (s[0], s[2]);
        let out = kernels::transpose_last2(x.data(), n, h * w, c);
        self.unary("from_tokens", vec![n, c, h, w], out, Op::TransposeLast2 { input: self.id, n, rows: h * w, cols: c })
    }
}

/// Scaled dot-product attention, `softmax(q k^T / sqrt(dim)) v`, over
/// `(N, tokens, dim)` operands.
pub fn attention<'g, E: Element>(q: Var<'g, E>, k: Var<'g, E>, v: Var<'g, E>) -> Result<Var<'g, E>> {
    q.same_graph(&k);
    q.same_graph(&v);
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    for t in [&qv, &kv, &vv] {
        expect_rank("attention", t.shape(), 3)?;
    }
    let (sq, sk, sv) = (qv.shape(), kv.shape(), vv.shape());
    if sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] {
        return Err(TensorError::ShapeMismatch { op: "attention", lhs: sq.to_vec(), rhs: sk.to_vec() });
    }
    let dims = (sq[0], sq[1], sk[1], sq[2], sv[2]);
    let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), dims);
    q.graph.record(
        "attention",
        vec![sq[0], sq[1], sv[2]],
        out,
        Op::Attention { q: q.id, k: k.id, v: v.id, probs },
        &[q.id, k.id, v.id],
    )
}

/// Row-stochastic attention weights for inspection: `(N, tq, tk)`.
pub fn attention_weights<E: Element>(q: &Tensor<E>, k: &Tensor<E>) -> Result<Tensor<E>> {
    let (sq, sk) = (q.shape(), k.shape());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(TensorError::ShapeMismatch { op: "attention_weights", lhs: sq.to_vec(), rhs: sk.to_vec() });
    }
    let v = Tensor::zeros(vec![sk[0], sk[1], 1]);
    let (_, probs) = kernels::attention_forward(q.data(), k.data(), v.data(), (sq[0], sq[1], sk[1], sq[2], 1));
    Tensor::new(vec![sq[0], sq[1], sk[1]], probs)
}
