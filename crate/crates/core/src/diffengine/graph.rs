use std::sync::Arc;

use super::kernels::{self, ConvGeom, SampleMap};
use super::tensor::{Nhwc, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Operator kinds understood by [`Graph::forward`]. Attributes travel inside
/// the variant; tensor operands are the node inputs, in the documented order.
#[derive(Clone, Debug)]
pub enum Op {
    /// Inputs `x: N×H×W×Cin`, `w: KH×KW×Cin×Cout`, `b: Cout`; zero padding.
    Conv2d { stride: usize, pad: usize },
    /// Inputs `x: N×In`, `w: In×Out`, `b: Out`.
    Dense,
    /// Nearest-neighbour 2× upsampling of an N×H×W×C tensor.
    Upsample2x,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
    /// Square root; the derivative at 0 is taken as 0.
    Sqrt,
    /// Elementwise |x| with sign(0) = 0 in the backward pass.
    Abs,
    Square,
    Add,
    Sub,
    Mul,
    /// `a: …×C` times `b: …×1`, broadcasting `b` over the channel axis.
    MulChannel,
    ScalarMul(f32),
    ScalarAdd(f32),
    AbsSum,
    SqSum,
    Mean,
    ConcatChannels,
    SliceChannels { start: usize, len: usize },
    Reshape(Vec<usize>),
    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    Clip { lo: f32, hi: f32 },
    /// Bilinear gather of an N×H×W×C tensor through precomputed taps.
    Resample(Arc<SampleMap>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Dense => "dense",
            Op::Upsample2x => "upsample2x",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "pointwise_mul",
            Op::MulChannel => "mul_channel",
            Op::ScalarMul(_) => "scalar_mul",
            Op::ScalarAdd(_) => "scalar_add",
            Op::AbsSum => "abs_sum",
            Op::SqSum => "sq_sum",
            Op::Mean => "mean",
            Op::ConcatChannels => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Reshape(_) => "reshape",
            Op::Clip { .. } => "clip",
            Op::Resample(_) => "resample",
        }
    }
}

#[derive(Debug)]
enum Kind {
    Leaf,
    Op(Op),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    kind: Kind,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    /// im2col buffer of a convolution, kept for the backward pass.
    cols: Option<Vec<f32>>,
}

/// Records a forward computation eagerly, node by node, for later
/// reverse-mode replay. A graph is built per step and dropped afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn arity_error(op: &Op, want: usize, got: usize) -> Error {
    Error::Invalid(format!("{} takes {want} inputs, got {got}", op.name()))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// Sign with sign(0) = 0.
pub fn sign0(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            kind: Kind::Leaf,
            inputs: Vec::new(),
            requires_grad,
            cols: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf (a trainable parameter or an attacked input).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Branch taken by each element of each non-smooth operator, in node
    /// order. Two evaluations of the same graph with equal patterns lie on
    /// the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let Kind::Op(op) = &node.kind else { continue };
            let input = |k: usize| self.nodes[node.inputs[k].0].value.data();
            match op {
                Op::LeakyRelu(_) | Op::Abs | Op::AbsSum | Op::Sqrt => {
                    out.extend(input(0).iter().map(|&v| sign0(v) as i8));
                }
                Op::Clip { lo, hi } => out.extend(input(0).iter().map(|&v| {
                    if v <= *lo {
                        -1
                    } else if v >= *hi {
                        1
                    } else {
                        0
                    }
                })),
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The operator and inputs that produced `id`, or `None` for a leaf.
    /// Lets external code replay a recorded graph.
    pub fn op(&self, id: NodeId) -> Option<(&Op, &[NodeId])> {
        let node = &self.nodes[id.0];
        match &node.kind {
            Kind::Leaf => None,
            Kind::Op(op) => Some((op, &node.inputs)),
        }
    }

    /// Node ids in recording order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn forward(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let (value, cols) = match op {
            Op::Conv2d { stride, pad } if inputs.len() == 3 => {
                let v = |i: usize| &self.nodes[inputs[i].0].value;
                let (value, cols) = conv_forward(v(0), v(1), v(2), stride, pad)?;
                (value, requires_grad.then_some(cols))
            }
            _ => (self.eval(&op, inputs)?, None),
        };
        self.nodes.push(Node {
            value,
            kind: Kind::Op(op),
            inputs: inputs.to_vec(),
            requires_grad,
            cols,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor> {
        let arity = match op {
            Op::Conv2d { .. } | Op::Dense => 3,
            Op::Add | Op::Sub | Op::Mul | Op::MulChannel => 2,
            Op::ConcatChannels => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(arity_error(op, arity, inputs.len()));
        }
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let unary = |f: &dyn Fn(f32) -> f32| Ok(v(0).map(f));
        match op {
            Op::Conv2d { stride, pad } => conv_forward(v(0), v(1), v(2), *stride, *pad).map(|(t, _)| t),
            Op::Dense => dense_forward(v(0), v(1), v(2)),
            Op::Upsample2x => {
                let s = Nhwc::of("upsample2x", v(0).shape())?;
                let out = Nhwc { h: s.h * 2, w: s.w * 2, ..s };
                Ok(Tensor::from_parts(out.dims(), kernels::upsample2x(v(0).data(), s)))
            }
            Op::LeakyRelu(slope) => {
                let slope = *slope;
                unary(&|x| if x > 0.0 { x } else { slope * x })
            }
            Op::Tanh => unary(&f32::tanh),
            Op::Sigmoid => unary(&sigmoid),
            Op::Sqrt => {
                if v(0).data().iter().any(|&x| x < 0.0) {
                    return Err(Error::Invalid("sqrt of a negative value".into()));
                }
                unary(&f32::sqrt)
            }
            Op::Abs => unary(&f32::abs),
            Op::Square => unary(&|x| x * x),
            Op::Add | Op::Sub | Op::Mul => {
                let name = op.name();
                same_shape(name, v(0), v(1))?;
                let data = match op {
                    Op::Add => zip_map(v(0), v(1), |a, b| a + b),
                    Op::Sub => zip_map(v(0), v(1), |a, b| a - b),
                    _ => zip_map(v(0), v(1), |a, b| a * b),
                };
                Ok(Tensor::from_parts(v(0).shape().to_vec(), data))
            }
            Op::MulChannel => {
                let (a, b) = (v(0), v(1));
                check_channel_broadcast(a, b)?;
                let c = *a.shape().last().unwrap_or(&1);
                let mut data = a.data().to_vec();
                for (row, &m) in data.chunks_mut(c).zip(b.data()) {
                    for x in row {
                        *x *= m;
                    }
                }
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Op::ScalarMul(s) => {
                let s = *s;
                unary(&|x| s * x)
            }
            Op::ScalarAdd(s) => {
                let s = *s;
                unary(&|x| x + s)
            }
            Op::AbsSum => Ok(Tensor::scalar(v(0).data().iter().fold(0.0, |acc, x| acc + x.abs()))),
            Op::SqSum => Ok(Tensor::scalar(v(0).data().iter().fold(0.0, |acc, x| acc + x * x))),
            Op::Mean => {
                let t = v(0);
                let sum = t.data().iter().fold(0.0f32, |acc, x| acc + x);
                Ok(Tensor::scalar(sum / t.len() as f32))
            }
            Op::ConcatChannels => {
                let parts: Vec<&Tensor> = (0..inputs.len()).map(v).collect();
                concat_channels(&parts)
            }
            Op::SliceChannels { start, len } => {
                let t = v(0);
                let c = *t.shape().last().unwrap_or(&0);
                if *len == 0 || start + len > c {
                    return Err(Error::Shape {
                        op: "slice_channels",
                        shapes: format!("{:?} [{start}..{})", t.shape(), start + len),
                    });
                }
                let mut data = Vec::with_capacity(t.len() / c * len);
                for row in t.data().chunks(c) {
                    data.extend_from_slice(&row[*start..start + len]);
                }
                let mut shape = t.shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                Ok(Tensor::from_parts(shape, data))
            }
            Op::Reshape(shape) => v(0).clone().reshape(shape),
            Op::Clip { lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::Invalid(format!("clip bounds [{lo}, {hi}]")));
                }
                let (lo, hi) = (*lo, *hi);
                unary(&|x| x.clamp(lo, hi))
            }
            Op::Resample(map) => {
                let s = Nhwc::of("resample", v(0).shape())?;
                if s.n != map.n || s.h != map.h_in || s.w != map.w_in {
                    return Err(Error::Shape {
                        op: "resample",
                        shapes: format!(
                            "{:?} vs map {}×{}×{}",
                            v(0).shape(),
                            map.n,
                            map.h_in,
                            map.w_in
                        ),
                    });
                }
                let out = Nhwc { h: map.h_out, w: map.w_out, ..s };
                Ok(Tensor::from_parts(out.dims(), map.apply(v(0).data(), s.c)))
            }
        }
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// differentiable node. Nodes that do not reach `loss` get no entry,
    /// which [`Gradients::wrt`] reports as zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Kind::Op(op) = &node.kind else { continue };
            let Some(g) = grads[i].take() else { continue };
            self.vjp(op, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, op: &Op, node: &Node, g: &Tensor, acc: &mut [Option<Tensor>]) -> Result<()> {
        let inp = |k: usize| &self.nodes[node.inputs[k].0];
        let wants = |k: usize| inp(k).requires_grad;
        let out = &node.value;
        let send = |k: usize, data: Vec<f32>, acc: &mut [Option<Tensor>]| {
            let id = node.inputs[k];
            let t = Tensor::from_parts(self.nodes[id.0].value.shape().to_vec(), data);
            accumulate(acc, id, t);
        };
        let gd = g.data();
        match op {
            Op::Conv2d { stride, pad } => {
                let (x, w) = (&inp(0).value, &inp(1).value);
                let geom = conv_geom(x, w, *stride, *pad)?;
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                if wants(1) {
                    let fresh;
                    let cols = match &node.cols {
                        Some(c) => c,
                        None => {
                            fresh = kernels::im2col(x.data(), &geom);
                            &fresh
                        }
                    };
                    let dw = kernels::gemm_new(patch, rows, cout, cols, (1, patch), gd, (cout, 1));
                    send(1, dw, acc);
                }
                if wants(2) {
                    send(2, kernels::column_sums(gd, cout), acc);
                }
                if wants(0) {
                    let dcols = kernels::gemm_new(rows, cout, patch, gd, (cout, 1), w.data(), (1, cout));
                    send(0, kernels::col2im(&dcols, &geom), acc);
                }
            }
            Op::Dense => {
                let (x, w) = (&inp(0).value, &inp(1).value);
                let (n, din) = (x.shape()[0], x.shape()[1]);
                let dout = w.shape()[1];
                if wants(0) {
                    let dx = kernels::gemm_new(n, dout, din, gd, (dout, 1), w.data(), (1, dout));
                    send(0, dx, acc);
                }
                if wants(1) {
                    let dw = kernels::gemm_new(din, n, dout, x.data(), (1, din), gd, (dout, 1));
                    send(1, dw, acc);
                }
                if wants(2) {
                    send(2, kernels::column_sums(gd, dout), acc);
                }
            }
            Op::Upsample2x => {
                let s = Nhwc::of("upsample2x", inp(0).value.shape())?;
                send(0, kernels::upsample2x_backward(gd, s), acc);
            }
            Op::LeakyRelu(slope) => {
                let d = zip_map(&inp(0).value, g, |x, g| if x > 0.0 { g } else { slope * g });
                send(0, d, acc);
            }
            Op::Tanh => send(0, zip_map(out, g, |y, g| (1.0 - y * y) * g), acc),
            Op::Sigmoid => send(0, zip_map(out, g, |y, g| y * (1.0 - y) * g), acc),
            Op::Sqrt => send(0, zip_map(out, g, |y, g| if y > 0.0 { g / (2.0 * y) } else { 0.0 }), acc),
            Op::Abs => send(0, zip_map(&inp(0).value, g, |x, g| sign0(x) * g), acc),
            Op::Square => send(0, zip_map(&inp(0).value, g, |x, g| 2.0 * x * g), acc),
            Op::Add | Op::Sub => {
                if wants(0) {
                    send(0, gd.to_vec(), acc);
                }
                if wants(1) {
                    let neg = matches!(op, Op::Sub);
                    send(1, gd.iter().map(|&v| if neg { -v } else { v }).collect(), acc);
                }
            }
            Op::Mul => {
                if wants(0) {
                    send(0, zip_map(g, &inp(1).value, |g, b| g * b), acc);
                }
                if wants(1) {
                    send(1, zip_map(g, &inp(0).value, |g, a| g * a), acc);
                }
            }
            Op::MulChannel => {
                let (a, b) = (&inp(0).value, &inp(1).value);
                let c = *a.shape().last().unwrap_or(&1);
                if wants(0) {
                    let mut d = gd.to_vec();
                    for (row, &m) in d.chunks_mut(c).zip(b.data()) {
                        for x in row {
                            *x *= m;
                        }
                    }
                    send(0, d, acc);
                }
                if wants(1) {
                    let d = gd
                        .chunks(c)
                        .zip(a.data().chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).fold(0.0f32, |s, (g, a)| s + g * a))
                        .collect();
                    send(1, d, acc);
                }
            }
            Op::ScalarMul(s) => send(0, gd.iter().map(|g| s * g).collect(), acc),
            Op::ScalarAdd(_) | Op::Reshape(_) => send(0, gd.to_vec(), acc),
            Op::AbsSum => {
                let g0 = gd[0];
                send(0, inp(0).value.data().iter().map(|&x| sign0(x) * g0).collect(), acc);
            }
            Op::SqSum => {
                let g0 = gd[0];
                send(0, inp(0).value.data().iter().map(|&x| 2.0 * x * g0).collect(), acc);
            }
            Op::Mean => {
                let n = inp(0).value.len();
                let share = gd[0] / n as f32;
                send(0, vec![share; n], acc);
            }
            Op::ConcatChannels => {
                let widths: Vec<usize> = node
                    .inputs
                    .iter()
                    .map(|i| *self.nodes[i.0].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (k, &wk) in widths.iter().enumerate() {
                    if wants(k) {
                        let mut d = Vec::with_capacity(gd.len() / total * wk);
                        for row in gd.chunks(total) {
                            d.extend_from_slice(&row[offset..offset + wk]);
                        }
                        send(k, d, acc);
                    }
                    offset += wk;
                }
            }
            Op::SliceChannels { start, len } => {
                let c = *inp(0).value.shape().last().unwrap();
                let mut d = vec![0.0f32; inp(0).value.len()];
                for (row, src) in d.chunks_mut(c).zip(gd.chunks(*len)) {
                    row[*start..start + len].copy_from_slice(src);
                }
                send(0, d, acc);
            }
            Op::Clip { lo, hi } => {
                let d = zip_map(&inp(0).value, g, |x, g| if x > *lo && x < *hi { g } else { 0.0 });
                send(0, d, acc);
            }
            Op::Resample(map) => {
                let c = *inp(0).value.shape().last().unwrap();
                send(0, map.apply_transpose(gd, c), acc);
            }
        }
        Ok(())
    }

    // Convenience wrappers over `forward`.

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.forward(Op::Conv2d { stride, pad }, &[x, w, b])
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Dense, &[x, w, b])
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Upsample2x, &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> Result<NodeId> {
        self.forward(Op::LeakyRelu(slope), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Sigmoid, &[x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Sqrt, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Abs, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Square, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Mul, &[a, b])
    }

    pub fn mul_channel(&mut self, a: NodeId, mask: NodeId) -> Result<NodeId> {
        self.forward(Op::MulChannel, &[a, mask])
    }

    pub fn scalar_mul(&mut self, x: NodeId, s: f32) -> Result<NodeId> {
        self.forward(Op::ScalarMul(s), &[x])
    }

    pub fn scalar_add(&mut self, x: NodeId, s: f32) -> Result<NodeId> {
        self.forward(Op::ScalarAdd(s), &[x])
    }

    pub fn abs_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::AbsSum, &[x])
    }

    pub fn sq_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::SqSum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Mean, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.forward(Op::ConcatChannels, parts)
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.forward(Op::SliceChannels { start, len }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.forward(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn clip(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        self.forward(Op::Clip { lo, hi }, &[x])
    }

    pub fn resample(&mut self, x: NodeId, map: Arc<SampleMap>) -> Result<NodeId> {
        self.forward(Op::Resample(map), &[x])
    }
}

fn accumulate(acc: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut acc[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_channel_broadcast(a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    let ok = !sa.is_empty()
        && sa.len() == sb.len()
        && sb.last() == Some(&1)
        && sa[..sa.len() - 1] == sb[..sb.len() - 1];
    if ok {
        Ok(())
    } else {
        Err(Error::shape("mul_channel", &[sa, sb]))
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let input = Nhwc::of("conv2d", x.shape())?;
    let bad = || Error::shape("conv2d", &[x.shape(), w.shape()]);
    let [kh, kw, cin, cout] = *w.shape() else {
        return Err(bad());
    };
    if cin != input.c {
        return Err(bad());
    }
    ConvGeom::new(input, kh, kw, cout, stride, pad).ok_or_else(bad)
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<(Tensor, Vec<f32>)> {
    let geom = conv_geom(x, w, stride, pad)?;
    if b.shape() != [geom.cout] {
        return Err(Error::shape("conv2d", &[w.shape(), b.shape()]));
    }
    let cols = kernels::im2col(x.data(), &geom);
    let (patch, cout) = (geom.patch(), geom.cout);
    let mut out = kernels::gemm_new(geom.rows(), patch, cout, &cols, (patch, 1), w.data(), (cout, 1));
    kernels::add_row_bias(&mut out, b.data());
    Ok((Tensor::from_parts(geom.output().dims(), out), cols))
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([n, din], [win, dout]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("dense", &[x.shape(), w.shape()]));
    };
    if din != win || b.shape() != [*dout] {
        return Err(Error::shape("dense", &[x.shape(), w.shape(), b.shape()]));
    }
    let mut out = kernels::gemm_new(*n, *din, *dout, x.data(), (*din, 1), w.data(), (*dout, 1));
    kernels::add_row_bias(&mut out, b.data());
    Ok(Tensor::from_parts(vec![*n, *dout], out))
}

fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts[0].shape();
    if first.is_empty() {
        return Err(Error::shape("concat_channels", &[first]));
    }
    let lead = &first[..first.len() - 1];
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || &s[..s.len() - 1] != lead {
            return Err(Error::shape("concat_channels", &[first, s]));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = parts[0].len() / widths[0];
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &wk) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * wk..(r + 1) * wk]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros shaped like its value when the node does
    /// not influence the loss.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }
}
