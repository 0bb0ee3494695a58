//! Define-then-run computation graphs with reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes from a fixed op vocabulary.
//! Nodes may only reference earlier nodes, so the list is always in
//! topological order. Evaluation binds named inputs, computes every node
//! ([`Tape::forward`]), and [`Tape::gradient`] propagates adjoints from a
//! scalar root back to any set of nodes, intermediate activations included.
//!
//! Tensors are batched NCHW where convolution or pooling is involved.

mod check;
mod kernels;
pub mod reference;

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use check::finite_difference_check;
pub(crate) use kernels::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations a tape can record.
#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String, shape: Vec<usize> },
    Const(Tensor),
    /// Elementwise sum; the right operand may also broadcast over leading
    /// dimensions when its shape is a suffix of the left shape.
    Add(NodeId, NodeId),
    /// Elementwise difference with the same broadcasting rule as `Add`.
    Sub(NodeId, NodeId),
    /// Tensor times a `[1]` scalar node.
    Mul(NodeId, NodeId),
    /// Tensor divided by a `[1]` scalar node.
    Div(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `[N,C,H,W]` input, `[O,C,KH,KW]` kernel, optional `[O]` bias.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    MaxPool2x2(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    /// Mean over the batch of `-Σ targets · log softmax(logits)`; both `[N,d]`.
    SoftmaxCrossEntropy { logits: NodeId, targets: NodeId },
    Dot(NodeId, NodeId),
    Reshape(NodeId, Vec<usize>),
    L2Norm(NodeId),
    Scale(NodeId, f32),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Hadamard(..) => "hadamard",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool2x2(_) => "maxpool2x2",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Dot(..) => "dot",
            Op::Reshape(..) => "reshape",
            Op::L2Norm(_) => "l2_norm",
            Op::Scale(..) => "scale",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Hadamard(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::SoftmaxCrossEntropy { logits, targets } => vec![*logits, *targets],
            Op::Relu(a)
            | Op::MaxPool2x2(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Reshape(a, _)
            | Op::L2Norm(a)
            | Op::Scale(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// An ordered list of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Named input tensors for one evaluation.
#[derive(Default)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, value: &'a Tensor) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor) {
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Values of every node after a forward pass.
#[derive(Clone, Debug)]
pub struct Values {
    values: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn take(mut self, id: NodeId) -> Tensor {
        self.values.swap_remove(id.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gradients of a scalar root with respect to requested nodes.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        self.grads
            .get(&id)
            .unwrap_or_else(|| panic!("gradient for {id:?} was not requested"))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads
            .remove(&id)
            .unwrap_or_else(|| panic!("gradient for {id:?} was not requested"))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
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

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Every node in push order.
    pub fn ops(&self) -> impl Iterator<Item = (NodeId, &Op)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), &n.op))
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        for input in op.inputs() {
            assert!(input.0 < id.0, "tape nodes must reference earlier nodes");
        }
        self.nodes.push(Node { op, label: None });
        id
    }

    /// Attaches a human-readable label used in error messages.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    /// Looks up an input node by name.
    pub fn find_input(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| matches!(&n.op, Op::Input { name: n2, .. } if n2 == name)).map(NodeId)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            shape: shape.to_vec(),
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        self.push(Op::Mul(a, scalar))
    }

    pub fn div(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        self.push(Op::Div(a, scalar))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Hadamard(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.push(Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn maxpool2x2(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MaxPool2x2(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot(a, b))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Norm(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub(crate) fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(l) => format!("node {id} ({} `{l}`)", node.op.name()),
            None => match &node.op {
                Op::Input { name, .. } => format!("node {id} (input `{name}`)"),
                op => format!("node {id} ({})", op.name()),
            },
        }
    }

    fn mismatch(&self, id: NodeId, expected: impl Into<String>, actual: &[usize]) -> Error {
        Error::ShapeMismatch {
            node: self.describe(id),
            expected: expected.into(),
            actual: actual.to_vec(),
        }
    }

    /// Evaluates every node.
    pub fn forward(&self, inputs: &Bindings<'_>) -> Result<Values> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = self.eval(NodeId(i), &node.op, &values, inputs)?;
            values.push(v);
        }
        Ok(Values { values })
    }

    fn eval(&self, id: NodeId, op: &Op, vals: &[Tensor], inputs: &Bindings<'_>) -> Result<Tensor> {
        let v = |n: &NodeId| &vals[n.0];
        Ok(match op {
            Op::Input { name, shape } => {
                let t = inputs.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(self.mismatch(id, format!("{shape:?}"), t.shape()));
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (a, b) = (v(a), v(b));
                let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                if !broadcast_ok(a.shape(), b.shape()) {
                    return Err(self.mismatch(id, format!("{:?} or a suffix of it", a.shape()), b.shape()));
                }
                let bw = b.len();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + sign * b.data()[i % bw])
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Mul(a, s) | Op::Div(a, s) => {
                let (a, s) = (v(a), v(s));
                if s.len() != 1 {
                    return Err(self.mismatch(id, "[1] scalar operand", s.shape()));
                }
                let s = s.item();
                if matches!(op, Op::Mul(..)) {
                    a.map(|x| x * s)
                } else {
                    a.map(|x| x / s)
                }
            }
            Op::Hadamard(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(self.mismatch(id, format!("{:?}", a.shape()), b.shape()));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape().len() != 2 {
                    return Err(self.mismatch(id, "2-D left operand", a.shape()));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                if b.shape().len() != 2 || b.shape()[0] != k {
                    return Err(self.mismatch(id, format!("[{k}, n] right operand"), b.shape()));
                }
                let n = b.shape()[1];
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
                Tensor::new(vec![m, n], out)?
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (x, k) = (v(input), v(kernel));
                let geom = self.conv_geom(id, x.shape(), k.shape(), *stride, *padding)?;
                let b = match bias {
                    Some(b) => {
                        let b = v(b);
                        if b.shape() != [geom.out_channels] {
                            return Err(self.mismatch(id, format!("bias [{}]", geom.out_channels), b.shape()));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                let n = x.shape()[0];
                let out = kernels::conv2d_forward(&geom, n, x.data(), k.data(), b);
                Tensor::new(vec![n, geom.out_channels, geom.out_h, geom.out_w], out)?
            }
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::MaxPool2x2(a) => {
                let a = v(a);
                let s = a.shape();
                if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
                    return Err(self.mismatch(id, "[N, C, H, W] with even H and W", s));
                }
                let out = kernels::maxpool_forward(s[0] * s[1], s[2], s[3], a.data());
                Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?
            }
            Op::Mean(a) => {
                let a = v(a);
                let s: f64 = a.data().iter().map(|&x| x as f64).sum();
                Tensor::scalar((s / a.len() as f64) as f32)
            }
            Op::Sum(a) => {
                let s: f64 = v(a).data().iter().map(|&x| x as f64).sum();
                Tensor::scalar(s as f32)
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let (z, t) = (v(logits), v(targets));
                if z.shape().len() != 2 {
                    return Err(self.mismatch(id, "[N, d] logits", z.shape()));
                }
                if t.shape() != z.shape() {
                    return Err(self.mismatch(id, format!("targets {:?}", z.shape()), t.shape()));
                }
                let rows = z.shape()[0];
                let mut total = 0.0f64;
                for r in 0..rows {
                    let lsm = log_softmax(z.row(r));
                    total -= lsm.iter().zip(t.row(r)).map(|(l, &ti)| l * ti as f64).sum::<f64>();
                }
                Tensor::scalar((total / rows as f64) as f32)
            }
            Op::Dot(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.len() != b.len() {
                    return Err(self.mismatch(id, format!("{} elements", a.len()), b.shape()));
                }
                Tensor::scalar(a.dot(b) as f32)
            }
            Op::Reshape(a, shape) => {
                let a = v(a);
                let numel: usize = shape.iter().product();
                if numel != a.len() || shape.contains(&0) {
                    return Err(self.mismatch(id, format!("{} elements as {shape:?}", numel), a.shape()));
                }
                a.clone().reshape(shape)?
            }
            Op::L2Norm(a) => Tensor::scalar(v(a).l2_norm() as f32),
            Op::Scale(a, c) => {
                let c = *c;
                v(a).map(|x| x * c)
            }
        })
    }

    fn conv_geom(
        &self,
        id: NodeId,
        x: &[usize],
        k: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<kernels::ConvGeom> {
        if x.len() != 4 {
            return Err(self.mismatch(id, "[N, C, H, W] input", x));
        }
        if k.len() != 4 || k[1] != x[1] {
            return Err(self.mismatch(id, format!("[O, {}, KH, KW] kernel", x[1]), k));
        }
        if stride == 0 || x[2] + 2 * padding < k[2] || x[3] + 2 * padding < k[3] {
            return Err(self.mismatch(id, "kernel no larger than padded input and stride ≥ 1", k));
        }
        Ok(kernels::ConvGeom {
            channels: x[1],
            height: x[2],
            width: x[3],
            out_channels: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            padding,
            out_h: (x[2] + 2 * padding - k[2]) / stride + 1,
            out_w: (x[3] + 2 * padding - k[3]) / stride + 1,
        })
    }

    /// Reverse-mode gradient of the scalar `root` with respect to `wrt`.
    ///
    /// Nodes in `wrt` that `root` does not depend on receive zero gradients.
    pub fn gradient(&self, values: &Values, root: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        let root_shape = values.get(root).shape();
        if root_shape != [1] {
            return Err(Error::NonScalarRoot {
                node: self.describe(root),
                shape: root_shape.to_vec(),
            });
        }
        // A node needs an adjoint when some requested node lies upstream of it.
        let mut requires = vec![false; self.nodes.len()];
        for w in wrt {
            requires[w.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !requires[i] && node.op.inputs().iter().any(|n| requires[n.0]) {
                requires[i] = true;
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = &self.nodes[i].op;
            let keep = wrt.contains(&NodeId(i));
            self.backward_node(op, &g, values, &requires, &mut adj)?;
            if keep {
                adj[i] = Some(g);
            }
        }

        let grads = wrt
            .iter()
            .map(|&w| {
                let g = adj[w.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(values.get(w).shape()));
                (w, g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        op: &Op,
        g: &Tensor,
        values: &Values,
        requires: &[bool],
        adj: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |n: &NodeId| values.get(*n);
        let need = |n: &NodeId| requires[n.0];
        let mut acc = |n: NodeId, t: Tensor| match &mut adj[n.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match op {
            Op::Input { .. } | Op::Const(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if need(a) {
                    acc(*a, g.clone());
                }
                if need(b) {
                    let bshape = val(b).shape().to_vec();
                    let bw: usize = bshape.iter().product();
                    let mut gb = vec![0.0f32; bw];
                    for (i, &x) in g.data().iter().enumerate() {
                        gb[i % bw] += x;
                    }
                    if matches!(op, Op::Sub(..)) {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    acc(*b, Tensor::new(bshape, gb)?);
                }
            }
            Op::Mul(a, s) => {
                let sv = val(s).item();
                if need(a) {
                    acc(*a, g.map(|x| x * sv));
                }
                if need(s) {
                    acc(*s, Tensor::scalar(g.dot(val(a)) as f32));
                }
            }
            Op::Div(a, s) => {
                let sv = val(s).item();
                if need(a) {
                    acc(*a, g.map(|x| x / sv));
                }
                if need(s) {
                    let d = -g.dot(val(a)) / (sv as f64 * sv as f64);
                    acc(*s, Tensor::scalar(d as f32));
                }
            }
            Op::Hadamard(a, b) => {
                if need(a) {
                    acc(*a, hadamard(g, val(b)));
                }
                if need(b) {
                    acc(*b, hadamard(g, val(a)));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut ga, 0.0);
                    acc(*a, Tensor::new(vec![m, k], ga)?);
                }
                if need(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut gb, 0.0);
                    acc(*b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (x, k) = (val(input), val(kernel));
                let geom = kernels::ConvGeom {
                    channels: x.shape()[1],
                    height: x.shape()[2],
                    width: x.shape()[3],
                    out_channels: k.shape()[0],
                    kh: k.shape()[2],
                    kw: k.shape()[3],
                    stride: *stride,
                    padding: *padding,
                    out_h: g.shape()[2],
                    out_w: g.shape()[3],
                };
                let need_b = bias.map(|b| need(&b)).unwrap_or(false);
                let (dx, dk, db) = kernels::conv2d_backward(
                    &geom,
                    x.shape()[0],
                    x.data(),
                    k.data(),
                    g.data(),
                    (need(input), need(kernel), need_b),
                );
                if let Some(dx) = dx {
                    acc(*input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    acc(*kernel, Tensor::new(k.shape().to_vec(), dk)?);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    acc(*b, Tensor::new(vec![geom.out_channels], db)?);
                }
            }
            Op::Relu(a) => {
                if need(a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(val(a).data())
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                        .collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::MaxPool2x2(a) => {
                if need(a) {
                    let x = val(a);
                    let s = x.shape();
                    let dx = kernels::maxpool_backward(s[0] * s[1], s[2], s[3], x.data(), g.data());
                    acc(*a, Tensor::new(s.to_vec(), dx)?);
                }
            }
            Op::Mean(a) => {
                if need(a) {
                    let x = val(a);
                    let gv = g.item() / x.len() as f32;
                    acc(*a, Tensor::full(x.shape(), gv));
                }
            }
            Op::Sum(a) => {
                if need(a) {
                    acc(*a, Tensor::full(val(a).shape(), g.item()));
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let (z, t) = (val(logits), val(targets));
                let rows = z.shape()[0];
                let scale = g.item() as f64 / rows as f64;
                let lsms: Vec<Vec<f64>> = (0..rows).map(|r| log_softmax(z.row(r))).collect();
                if need(logits) {
                    let mut gz = Vec::with_capacity(z.len());
                    for (r, lsm) in lsms.iter().enumerate() {
                        let tsum: f64 = t.row(r).iter().map(|&x| x as f64).sum();
                        for (l, &ti) in lsm.iter().zip(t.row(r)) {
                            gz.push(((l.exp() * tsum - ti as f64) * scale) as f32);
                        }
                    }
                    acc(*logits, Tensor::new(z.shape().to_vec(), gz)?);
                }
                if need(targets) {
                    let gt = lsms.iter().flatten().map(|l| (-l * scale) as f32).collect();
                    acc(*targets, Tensor::new(t.shape().to_vec(), gt)?);
                }
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                if need(a) {
                    let bv = val(b);
                    let t = Tensor::new(val(a).shape().to_vec(), bv.data().iter().map(|x| x * gv).collect())?;
                    acc(*a, t);
                }
                if need(b) {
                    let av = val(a);
                    let t = Tensor::new(val(b).shape().to_vec(), av.data().iter().map(|x| x * gv).collect())?;
                    acc(*b, t);
                }
            }
            Op::Reshape(a, _) => {
                if need(a) {
                    acc(*a, g.clone().reshape(val(a).shape())?);
                }
            }
            Op::L2Norm(a) => {
                if need(a) {
                    let x = val(a);
                    let norm = x.l2_norm();
                    let t = if norm > 0.0 {
                        let f = g.item() as f64 / norm;
                        x.map(|v| (v as f64 * f) as f32)
                    } else {
                        Tensor::zeros(x.shape())
                    };
                    acc(*a, t);
                }
            }
            Op::Scale(a, c) => {
                if need(a) {
                    let c = *c;
                    acc(*a, g.map(|x| x * c));
                }
            }
        }
        Ok(())
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn log_softmax(z: &[f32]) -> Vec<f64> {
    let max = z.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let lse = z.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&x| x as f64 - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[3]);
        let y = tape.relu(x);
        let xv = t(&[3], &[-1.0, 0.0, 2.0]);
        let vals = tape.forward(&Bindings::new().bind("x", &xv)).unwrap();
        assert_eq!(vals.get(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.input("a", &[2, 2]);
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i);
        let av = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let vals = tape.forward(&Bindings::new().bind("a", &av)).unwrap();
        assert_eq!(vals.get(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[1, 1, 3, 3]);
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0);
        let xv = Tensor::full(&[1, 1, 3, 3], 1.0);
        let vals = tape.forward(&Bindings::new().bind("x", &xv)).unwrap();
        assert_eq!(vals.get(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(vals.get(y).data(), &[4.0; 4]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[1]);
        let y = tape.input("y", &[1]);
        let p = tape.hadamard(x, y);
        let (xv, yv) = (Tensor::scalar(3.0), Tensor::scalar(4.0));
        let vals = tape.forward(&Bindings::new().bind("x", &xv).bind("y", &yv)).unwrap();
        let g = tape.gradient(&vals, p, &[x]).unwrap();
        assert_eq!(g.get(x).item(), 4.0);
    }

    #[test]
    fn l2_norm_gradient() {
        let mut tape = Tape::new();
        let v = tape.input("v", &[2]);
        let n = tape.l2_norm(v);
        let vv = t(&[2], &[3.0, 4.0]);
        let vals = tape.forward(&Bindings::new().bind("v", &vv)).unwrap();
        assert_eq!(vals.get(n).item(), 5.0);
        let g = tape.gradient(&vals, n, &[v]).unwrap();
        let gv = g.get(v).data();
        assert!((gv[0] - 0.6).abs() < 1e-7 && (gv[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = [1.0f64, -0.5, 0.2];
        let mut tape = Tape::new();
        let z = tape.input("z", &[1, 3]);
        let y = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(z, y);
        let zv = t(&[1, 3], &logits.map(|x| x as f32));
        let vals = tape.forward(&Bindings::new().bind("z", &zv)).unwrap();
        let g = tape.gradient(&vals, loss, &[z]).unwrap();

        // independent oracle: central differences of -log softmax_0 in f64
        let ce = |z: [f64; 3]| {
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - z[0]
        };
        let h = 1e-3;
        for i in 0..3 {
            let (mut up, mut dn) = (logits, logits);
            up[i] += h;
            dn[i] -= h;
            let fd = (ce(up) - ce(dn)) / (2.0 * h);
            assert!((g.get(z).data()[i] as f64 - fd).abs() < 1e-5, "coord {i}");
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2]);
        let vv = t(&[2], &[1.0, 2.0]);
        let vals = tape.forward(&Bindings::new().bind("x", &vv)).unwrap();
        assert!(matches!(tape.gradient(&vals, x, &[x]), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn shape_error_names_node() {
        let mut tape = Tape::new();
        let a = tape.input("a", &[2, 3]);
        let b = tape.input("b", &[2, 3]);
        let m = tape.matmul(a, b);
        tape.set_label(m, "bad");
        let av = Tensor::zeros(&[2, 3]);
        let err = tape.forward(&Bindings::new().bind("a", &av).bind("b", &av)).unwrap_err();
        match err {
            Error::ShapeMismatch { node, actual, .. } => {
                assert!(node.contains("bad"), "{node}");
                assert_eq!(actual, vec![2, 3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bias_broadcast_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 3]);
        let b = tape.input("b", &[3]);
        let y = tape.add(x, b);
        let s = tape.sum(y);
        let (xv, bv) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[3]));
        let vals = tape.forward(&Bindings::new().bind("x", &xv).bind("b", &bv)).unwrap();
        let g = tape.gradient(&vals, s, &[b]).unwrap();
        assert_eq!(g.get(b).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_wrt_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2]);
        let z = tape.input("z", &[2]);
        let s = tape.sum(x);
        let v = Tensor::full(&[2], 1.0);
        let vals = tape.forward(&Bindings::new().bind("x", &v).bind("z", &v)).unwrap();
        let g = tape.gradient(&vals, s, &[z, x]).unwrap();
        assert_eq!(g.get(z).data(), &[0.0, 0.0]);
        assert_eq!(g.get(x).data(), &[1.0, 1.0]);
    }
}
