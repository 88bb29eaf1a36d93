//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from named inputs, trainable parameters and
//! constants, then evaluated many times: [`Graph::forward`] binds the inputs
//! and caches every intermediate, [`Graph::backward`] walks the tape in
//! reverse and returns one gradient per parameter.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors bound to graph inputs.
pub type Feed = BTreeMap<String, Tensor>;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: Conv2dSpec,
    },
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    LogSumExpLast(NodeId),
    Broadcast(NodeId),
    Concat(Vec<NodeId>, usize),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Pad {
        input: NodeId,
        axis: usize,
        before: usize,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::LogSumExpLast(_) => "logsumexp_last",
            Op::Broadcast(_) => "broadcast",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
        }
    }

    /// Kinds whose derivative is undefined on a measure-zero set.
    fn is_piecewise(&self) -> bool {
        matches!(self, Op::Clamp(..))
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Recorded computation with cached forward values.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    evaluated: bool,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every element of `out_shape`, the flat index of the source element in
/// a right-aligned broadcast from `in_shape`.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for (i, &d) in in_shape.iter().enumerate() {
        eff[offset + i] = if d == 1 { 0 } else { in_strides[i] };
    }
    broadcast_like_walk(out_shape, &eff)
}

/// For every element of the permuted output, the flat index in the input.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    broadcast_like_walk(&out_shape, &eff)
}

fn broadcast_like_walk(out_shape: &[usize], eff: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn conv_out(len: usize, k: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = len + 2 * spec.padding;
    if padded < k || spec.stride == 0 {
        return None;
    }
    Some((padded - k) / spec.stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn label(&self, id: NodeId) -> String {
        format!("{}#{}", self.nodes[id.0].op.kind(), id.0)
    }

    fn next_label(&self, kind: &str) -> String {
        format!("{}#{}", kind, self.nodes.len())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Param => true,
            Op::Input(_) | Op::Constant => false,
            _ => self
                .inputs_of(&op)
                .iter()
                .any(|i| self.nodes[i.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        self.values.push(value);
        self.evaluated = false;
        id
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.push(op, shape, Tensor::zeros(&[0]))
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input(_) | Op::Param | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::Concat(items, _) => items.clone(),
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::LogSumExpLast(a)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Permute(a, _) => vec![*a],
            Op::Slice { input, .. } | Op::Pad { input, .. } => vec![*input],
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves -------------------------------------------------------

    /// Declares an input bound at every [`Graph::forward`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(Error::shape(name, "duplicate leaf name"));
        }
        let id = self.push_op(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares a trainable parameter with its initial value.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(Error::shape(name, "duplicate leaf name"));
        }
        let shape = value.shape().to_vec();
        let id = self.push(Op::Param, shape, value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, value)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|id| &self.values[id.0])
    }

    pub fn set_param(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let id = *self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))?;
        if value.shape() != self.nodes[id.0].shape.as_slice() {
            return Err(Error::shape(
                name,
                format!(
                    "parameter expects {:?}, got {:?}",
                    self.nodes[id.0].shape,
                    value.shape()
                ),
            ));
        }
        self.values[id.0].data_mut().copy_from_slice(value.data());
        self.evaluated = false;
        Ok(())
    }

    /// Current values of every parameter.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, id)| (k.clone(), self.values[id.0].clone()))
            .collect()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    /// Marks the node returned by `forward` and differentiated by `backward`.
    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
            .or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
    }

    /// Cached value from the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param | Op::Constant => Some(&self.values[id.0]),
            _ if self.evaluated => Some(&self.values[id.0]),
            _ => None,
        }
    }

    // ---- op builders ----------------------------------------------------

    fn same_shape(&self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.next_label(kind),
                format!("operands {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push_op(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push_op(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push_op(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("div", a, b)?;
        Ok(self.push_op(Op::Div(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Scale(a, factor), s)
    }

    pub fn offset(&mut self, a: NodeId, delta: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Offset(a, delta), s)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                self.next_label("matmul"),
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let s = vec![sa[0], sb[1]];
        Ok(self.push_op(Op::MatMul(a, b), s))
    }

    /// Batched 2-D convolution. `input: [B, Ci, H, W]`,
    /// `weight: [Co, Ci / groups, kh, kw]`, `bias: [Co]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: Conv2dSpec,
    ) -> Result<NodeId> {
        let label = self.next_label("conv2d");
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(label, format!("input {si:?}, weight {sw:?}")));
        }
        let g = spec.groups;
        if g == 0 || !si[1].is_multiple_of(g) || !sw[0].is_multiple_of(g) || sw[1] * g != si[1] {
            return Err(Error::shape(
                label,
                format!("channels: input {si:?}, weight {sw:?}, groups {g}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    label,
                    format!("bias {:?} for {} outputs", self.shape(b), sw[0]),
                ));
            }
        }
        let (Some(ho), Some(wo)) = (conv_out(si[2], sw[2], spec), conv_out(si[3], sw[3], spec))
        else {
            return Err(Error::shape(
                label,
                format!("kernel {sw:?} larger than input {si:?}"),
            ));
        };
        Ok(self.push_op(
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            vec![si[0], sw[0], ho, wo],
        ))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Log(a), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Sigmoid(a), s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Tanh(a), s)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Sqrt(a), s)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Square(a), s)
    }

    /// Clip to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push_op(Op::Clamp(a, lo, hi), s)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Sum(a), Vec::new())
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Mean(a), Vec::new())
    }

    /// Reduces the last axis by summation.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let Some((_, rest)) = s.split_last() else {
            return Err(Error::shape(self.next_label("sum_last"), "scalar input"));
        };
        let rest = rest.to_vec();
        Ok(self.push_op(Op::SumLast(a), rest))
    }

    /// Reduces the last axis by `log(sum(exp(.)))`, computed with max subtraction.
    pub fn logsumexp_last(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let Some((_, rest)) = s.split_last() else {
            return Err(Error::shape(
                self.next_label("logsumexp_last"),
                "scalar input",
            ));
        };
        let rest = rest.to_vec();
        Ok(self.push_op(Op::LogSumExpLast(a), rest))
    }

    /// Right-aligned broadcast to `shape`: each source dimension must be 1 or
    /// equal to the target dimension.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        let ok = s.len() <= shape.len()
            && s.iter()
                .zip(&shape[shape.len() - s.len()..])
                .all(|(&d, &t)| d == t || d == 1);
        if !ok {
            return Err(Error::shape(
                self.next_label("broadcast"),
                format!("cannot broadcast {s:?} to {shape:?}"),
            ));
        }
        Ok(self.push_op(Op::Broadcast(a), shape.to_vec()))
    }

    pub fn concat(&mut self, items: &[NodeId], axis: usize) -> Result<NodeId> {
        let label = self.next_label("concat");
        let Some(&first) = items.first() else {
            return Err(Error::shape(label, "nothing to concatenate"));
        };
        let mut shape = self.shape(first).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(label, format!("axis {axis} out of range")));
        }
        for &it in &items[1..] {
            let s = self.shape(it);
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    label,
                    format!("{s:?} vs {shape:?} on axis {axis}"),
                ));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push_op(Op::Concat(items.to_vec(), axis), shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(self.shape(a)) != numel(shape) {
            return Err(Error::shape(
                self.next_label("reshape"),
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        Ok(self.push_op(Op::Reshape(a), shape.to_vec()))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm
                .iter()
                .all(|&p| p < s.len() && !core::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape(
                self.next_label("permute"),
                format!("invalid permutation {perm:?} for {s:?}"),
            ));
        }
        let out: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push_op(Op::Permute(a, perm.to_vec()), out))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.permute(a, &[1, 0])
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let mut s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                self.next_label("slice"),
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        s[axis] = len;
        Ok(self.push_op(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            s,
        ))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, a: NodeId, axis: usize, before: usize, after: usize) -> Result<NodeId> {
        let mut s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                self.next_label("pad"),
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        s[axis] += before + after;
        Ok(self.push_op(
            Op::Pad {
                input: a,
                axis,
                before,
            },
            s,
        ))
    }

    // ---- evaluation -------------------------------------------------------

    /// Binds `feed`, evaluates every node and returns the output value.
    pub fn forward(&mut self, feed: &Feed) -> Result<Tensor> {
        for name in feed.keys() {
            if !self.inputs.contains_key(name) {
                return Err(Error::UnknownName(name.clone()));
            }
        }
        for (name, &id) in &self.inputs {
            let t = feed
                .get(name)
                .ok_or_else(|| Error::UnboundInput(name.clone()))?;
            if t.shape() != self.nodes[id.0].shape.as_slice() {
                return Err(Error::shape(
                    format!("input `{name}`"),
                    format!("expected {:?}, got {:?}", self.nodes[id.0].shape, t.shape()),
                ));
            }
        }
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Input(name) => feed[name].clone(),
                Op::Param | Op::Constant => continue,
                op => {
                    let op = op.clone();
                    let v = self.eval(&op, &self.nodes[i].shape)?;
                    if !v.all_finite() {
                        self.evaluated = false;
                        return Err(Error::numeric(format!(
                            "non-finite value produced by {}",
                            self.label(NodeId(i))
                        )));
                    }
                    v
                }
            };
            self.values[i] = value;
        }
        self.evaluated = true;
        let out = self
            .output()
            .ok_or_else(|| Error::shape("graph", "graph has no nodes"))?;
        Ok(self.values[out.0].clone())
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    fn eval(&self, op: &Op, shape: &[usize]) -> Result<Tensor> {
        let unary = |a: NodeId, f: &dyn Fn(f64) -> f64| self.v(a).map(f);
        let binary =
            |a: NodeId, b: NodeId, f: &dyn Fn(f64, f64) -> f64| self.v(a).zip_map(self.v(b), f);
        let out = match *op {
            Op::Input(_) | Op::Param | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => binary(a, b, &|x, y| x + y)?,
            Op::Sub(a, b) => binary(a, b, &|x, y| x - y)?,
            Op::Mul(a, b) => binary(a, b, &|x, y| x * y)?,
            Op::Div(a, b) => binary(a, b, &|x, y| x / y)?,
            Op::Scale(a, f) => unary(a, &|x| x * f),
            Op::Offset(a, d) => unary(a, &|x| x + d),
            Op::Exp(a) => unary(a, &math::exp),
            Op::Log(a) => unary(a, &math::ln),
            Op::Sigmoid(a) => unary(a, &math::sigmoid),
            Op::Tanh(a) => unary(a, &math::tanh),
            Op::Sqrt(a) => unary(a, &math::sqrt),
            Op::Square(a) => unary(a, &|x| x * x),
            Op::Clamp(a, lo, hi) => unary(a, &|x| x.clamp(lo, hi)),
            Op::Sum(a) => Tensor::scalar(self.v(a).sum()),
            Op::Mean(a) => Tensor::scalar(self.v(a).mean()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.v(a), self.v(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = vec![0.0; m * n];
                let (da, db) = (ta.data(), tb.data());
                for i in 0..m {
                    let row = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = da[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &y) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                            *o += x * y;
                        }
                    }
                }
                Tensor::new(shape, out)?
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => conv2d_forward(
                self.v(input),
                self.v(weight),
                bias.map(|b| self.v(b)),
                spec,
                shape,
            ),
            Op::SumLast(a) => {
                let t = self.v(a);
                let n = *t.shape().last().expect("checked at build");
                let data = t
                    .data()
                    .chunks_exact(n.max(1))
                    .map(|c| c.iter().sum())
                    .collect();
                Tensor::new(shape, data)?
            }
            Op::LogSumExpLast(a) => {
                let t = self.v(a);
                let n = *t.shape().last().expect("checked at build");
                let data = t.data().chunks_exact(n.max(1)).map(logsumexp).collect();
                Tensor::new(shape, data)?
            }
            Op::Broadcast(a) => {
                let t = self.v(a);
                let map = broadcast_map(t.shape(), shape);
                Tensor::new(shape, map.iter().map(|&i| t.data()[i]).collect())?
            }
            Op::Concat(ref items, axis) => {
                let (outer, _, inner) = split_axis(shape, axis);
                let mut data = Vec::with_capacity(numel(shape));
                for o in 0..outer {
                    for &it in items {
                        let t = self.v(it);
                        let chunk = t.shape()[axis] * inner;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(shape, data)?
            }
            Op::Reshape(a) => self.v(a).clone().reshape(shape)?,
            Op::Permute(a, ref perm) => {
                let t = self.v(a);
                let map = permute_map(t.shape(), perm);
                Tensor::new(shape, map.iter().map(|&i| t.data()[i]).collect())?
            }
            Op::Slice { input, axis, start } => {
                let t = self.v(input);
                let (outer, src_len, inner) = split_axis(t.shape(), axis);
                let len = shape[axis];
                let mut data = Vec::with_capacity(numel(shape));
                for o in 0..outer {
                    let base = o * src_len * inner + start * inner;
                    data.extend_from_slice(&t.data()[base..base + len * inner]);
                }
                Tensor::new(shape, data)?
            }
            Op::Pad {
                input,
                axis,
                before,
            } => {
                let t = self.v(input);
                let (outer, src_len, inner) = split_axis(t.shape(), axis);
                let dst_len = shape[axis];
                let mut data = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let dst = o * dst_len * inner + before * inner;
                    let src = o * src_len * inner;
                    data[dst..dst + src_len * inner]
                        .copy_from_slice(&t.data()[src..src + src_len * inner]);
                }
                Tensor::new(shape, data)?
            }
        };
        Ok(out)
    }

    /// Gradients of the scalar output with respect to every parameter.
    /// Parameters the output does not depend on receive zeros.
    pub fn backward(&mut self) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.output().ok_or(Error::BackwardBeforeForward)?;
        if numel(&self.nodes[out.0].shape) != 1 {
            return Err(Error::NonScalarOutput(self.nodes[out.0].shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(&self.nodes[out.0].shape, 1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            if let Op::Param = op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&op, NodeId(i), &g, &mut grads)?;
        }
        let mut result = Gradients::new();
        for (name, &id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
            result.insert(name.clone(), g);
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(g) => g.axpy(1.0, &delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        me: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let y = self.v(me);
        match *op {
            Op::Input(_) | Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                if self.wants(b) {
                    self.accumulate(grads, b, g.map(|x| -x))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.zip_map(self.v(b), |g, y| g * y)?)?;
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.zip_map(self.v(a), |g, x| g * x)?)?;
                }
            }
            Op::Div(a, b) => {
                let tb = self.v(b);
                if self.wants(a) {
                    self.accumulate(grads, a, g.zip_map(tb, |g, d| g / d)?)?;
                }
                if self.wants(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = y.zip_map(tb, |q, d| -q / d)?;
                    self.accumulate(grads, b, g.zip_map(&t, |g, t| g * t)?)?;
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, a, g.map(|x| x * f))?,
            Op::Offset(a, _) => self.accumulate(grads, a, g.clone())?,
            Op::Exp(a) => self.accumulate(grads, a, g.zip_map(y, |g, y| g * y)?)?,
            Op::Log(a) => self.accumulate(grads, a, g.zip_map(self.v(a), |g, x| g / x)?)?,
            Op::Sigmoid(a) => self.accumulate(grads, a, g.zip_map(y, |g, s| g * s * (1.0 - s))?)?,
            Op::Tanh(a) => self.accumulate(grads, a, g.zip_map(y, |g, t| g * (1.0 - t * t))?)?,
            Op::Sqrt(a) => self.accumulate(grads, a, g.zip_map(y, |g, r| g * 0.5 / r)?)?,
            Op::Square(a) => {
                self.accumulate(grads, a, g.zip_map(self.v(a), |g, x| 2.0 * g * x)?)?
            }
            Op::Clamp(a, lo, hi) => self.accumulate(
                grads,
                a,
                g.zip_map(self.v(a), |g, x| if x > lo && x < hi { g } else { 0.0 })?,
            )?,
            Op::Sum(a) => {
                self.accumulate(grads, a, Tensor::full(self.shape(a), g.item()))?;
            }
            Op::Mean(a) => {
                let n = numel(self.shape(a)) as f64;
                self.accumulate(grads, a, Tensor::full(self.shape(a), g.item() / n))?;
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.v(a), self.v(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gd = g.data();
                if self.wants(a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = gd[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(ta.shape(), da)?)?;
                }
                if self.wants(b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = ta.data()[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(&gd[i * n..(i + 1) * n])
                            {
                                *o += x * gv;
                            }
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(tb.shape(), db)?)?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    self.v(input),
                    self.v(weight),
                    g,
                    spec,
                    self.wants(input),
                    self.wants(weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, input, gi)?;
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, weight, gw)?;
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::SumLast(a) => {
                let n = *self.shape(a).last().expect("checked at build");
                let mut d = Vec::with_capacity(numel(self.shape(a)));
                for &gv in g.data() {
                    d.extend(core::iter::repeat_n(gv, n));
                }
                self.accumulate(grads, a, Tensor::new(self.shape(a), d)?)?;
            }
            Op::LogSumExpLast(a) => {
                let ta = self.v(a);
                let n = *ta.shape().last().expect("checked at build");
                let mut d = Vec::with_capacity(ta.len());
                for ((row, &lse), &gv) in
                    ta.data().chunks_exact(n.max(1)).zip(y.data()).zip(g.data())
                {
                    d.extend(row.iter().map(|&x| gv * math::exp(x - lse)));
                }
                self.accumulate(grads, a, Tensor::new(ta.shape(), d)?)?;
            }
            Op::Broadcast(a) => {
                let sa = self.shape(a);
                let map = broadcast_map(sa, g.shape());
                let mut d = vec![0.0; numel(sa)];
                for (&src, &gv) in map.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, a, Tensor::new(sa, d)?)?;
            }
            Op::Concat(ref items, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), axis);
                let mut offset = 0;
                for &it in items {
                    let s = self.shape(it);
                    let len = s[axis];
                    if self.wants(it) {
                        let mut d = Vec::with_capacity(numel(s));
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, it, Tensor::new(s, d)?)?;
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, a, g.clone().reshape(self.shape(a))?)?;
            }
            Op::Permute(a, ref perm) => {
                let sa = self.shape(a);
                let map = permute_map(sa, perm);
                let mut d = vec![0.0; numel(sa)];
                for (&src, &gv) in map.iter().zip(g.data()) {
                    d[src] = gv;
                }
                self.accumulate(grads, a, Tensor::new(sa, d)?)?;
            }
            Op::Slice { input, axis, start } => {
                let sa = self.shape(input);
                let (outer, src_len, inner) = split_axis(sa, axis);
                let len = g.shape()[axis];
                let mut d = vec![0.0; numel(sa)];
                for o in 0..outer {
                    let base = o * src_len * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, input, Tensor::new(sa, d)?)?;
            }
            Op::Pad {
                input,
                axis,
                before,
            } => {
                let sa = self.shape(input);
                let (outer, src_len, inner) = split_axis(sa, axis);
                let dst_len = g.shape()[axis];
                let mut d = Vec::with_capacity(numel(sa));
                for o in 0..outer {
                    let base = o * dst_len * inner + before * inner;
                    d.extend_from_slice(&g.data()[base..base + src_len * inner]);
                }
                self.accumulate(grads, input, Tensor::new(sa, d)?)?;
            }
        }
        Ok(())
    }

    /// Node kinds with kinks, listed as `kind#index`.
    pub fn piecewise_nodes(&self) -> Vec<String> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.is_piecewise() && n.requires_grad)
            .map(|(i, _)| self.label(NodeId(i)))
            .collect()
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + math::ln(row.iter().map(|&x| math::exp(x - m)).sum::<f64>())
}

/// Output positions `lo..hi` whose tap at kernel offset `k` lands inside an
/// input of length `len`.
fn valid_range(out: usize, len: usize, k: usize, stride: isize, pad: isize) -> (usize, usize) {
    let off = k as isize - pad;
    let lo = if off >= 0 {
        0
    } else {
        (-off + stride - 1) / stride
    };
    let last = len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / stride + 1 };
    let hi = (hi as usize).min(out);
    ((lo as usize).min(hi), hi)
}

fn is_pointwise(kh: usize, kw: usize, spec: Conv2dSpec) -> bool {
    kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
    out_shape: &[usize],
) -> Tensor {
    let (b, ci, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (co, cig, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let cog = co / spec.groups;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; b * co * ho * wo];
    if is_pointwise(kh, kw, spec) {
        let hw = h * w;
        for bi in 0..b {
            for oc in 0..co {
                let o = &mut out[(bi * co + oc) * hw..(bi * co + oc + 1) * hw];
                if let Some(bias) = bias {
                    o.fill(bias.data()[oc]);
                }
                for ic in 0..ci {
                    let wv = wt[oc * ci + ic];
                    let xc = &x[(bi * ci + ic) * hw..(bi * ci + ic + 1) * hw];
                    for (ov, xv) in o.iter_mut().zip(xc) {
                        *ov += wv * xv;
                    }
                }
            }
        }
        return Tensor::new(out_shape, out).expect("shape computed at build");
    }
    for bi in 0..b {
        for oc in 0..co {
            let g = oc / cog;
            let obase = (bi * co + oc) * ho * wo;
            let o = &mut out[obase..obase + ho * wo];
            if let Some(bias) = bias {
                o.fill(bias.data()[oc]);
            }
            for icl in 0..cig {
                let ic = g * cig + icl;
                let xbase = (bi * ci + ic) * h * w;
                let xc = &x[xbase..xbase + h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((oc * cig + icl) * kh + ky) * kw + kx];
                        let (y0, y1) = valid_range(ho, h, ky, s, p);
                        let (x0, x1) = valid_range(wo, w, kx, s, p);
                        for oy in y0..y1 {
                            let iy = (oy as isize * s + ky as isize - p) as usize;
                            let xrow = &xc[iy * w..(iy + 1) * w];
                            let orow = &mut o[oy * wo + x0..oy * wo + x1];
                            let ix0 = (x0 as isize * s + kx as isize - p) as usize;
                            if s == 1 {
                                for (ov, xv) in orow.iter_mut().zip(&xrow[ix0..]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * xrow[ix0 + j * s as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("shape computed at build")
}

#[allow(clippy::type_complexity)]
#[allow(clippy::needless_range_loop)]
fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    spec: Conv2dSpec,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (b, ci, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (co, cig, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
    let cog = co / spec.groups;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let x = input.data();
    let wt = weight.data();
    let gd = gout.data();
    let mut gi = if want_input {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut gw = if want_weight {
        vec![0.0; wt.len()]
    } else {
        Vec::new()
    };
    let mut gb = if want_bias { vec![0.0; co] } else { Vec::new() };
    if is_pointwise(kh, kw, spec) {
        let hw = h * w;
        for bi in 0..b {
            for oc in 0..co {
                let go = &gd[(bi * co + oc) * hw..(bi * co + oc + 1) * hw];
                if want_bias {
                    gb[oc] += go.iter().sum::<f64>();
                }
                for ic in 0..ci {
                    let xr = (bi * ci + ic) * hw..(bi * ci + ic + 1) * hw;
                    if want_weight {
                        gw[oc * ci + ic] += go
                            .iter()
                            .zip(&x[xr.clone()])
                            .map(|(g, x)| g * x)
                            .sum::<f64>();
                    }
                    if want_input {
                        let wv = wt[oc * ci + ic];
                        for (gi, g) in gi[xr].iter_mut().zip(go) {
                            *gi += wv * g;
                        }
                    }
                }
            }
        }
    } else {
        for bi in 0..b {
            for oc in 0..co {
                let g = oc / cog;
                let obase = (bi * co + oc) * ho * wo;
                let go = &gd[obase..obase + ho * wo];
                if want_bias {
                    gb[oc] += go.iter().sum::<f64>();
                }
                if !want_input && !want_weight {
                    continue;
                }
                for icl in 0..cig {
                    let ic = g * cig + icl;
                    let xbase = (bi * ci + ic) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((oc * cig + icl) * kh + ky) * kw + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            let (y0, y1) = valid_range(ho, h, ky, s, p);
                            let (x0, x1) = valid_range(wo, w, kx, s, p);
                            let step = s as usize;
                            for oy in y0..y1 {
                                let iy = (oy as isize * s + ky as isize - p) as usize;
                                let ix0 = (x0 as isize * s + kx as isize - p) as usize;
                                let row = xbase + iy * w + ix0;
                                let grow = &go[oy * wo + x0..oy * wo + x1];
                                if want_weight {
                                    acc += grow
                                        .iter()
                                        .enumerate()
                                        .map(|(j, gv)| gv * x[row + j * step])
                                        .sum::<f64>();
                                }
                                if want_input {
                                    for (j, gv) in grow.iter().enumerate() {
                                        gi[row + j * step] += gv * wv;
                                    }
                                }
                            }
                            if want_weight {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        want_input.then(|| Tensor::new(input.shape(), gi).expect("input shape")),
        want_weight.then(|| Tensor::new(weight.shape(), gw).expect("weight shape")),
        want_bias.then(|| Tensor::new(&[co], gb).expect("bias shape")),
    )
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every parameter entry.
    pub max_rel_error: f64,
    /// Parameter entry where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Piecewise-differentiable nodes on a gradient path. Their kinks are
    /// excluded from the guarantee; the error above still covers them.
    pub piecewise: Vec<String>,
    pub entries_checked: usize,
}

/// Compares [`Graph::backward`] with central finite differences of
/// [`Graph::forward`] for every parameter entry.
pub fn grad_check(graph: &mut Graph, feed: &Feed, epsilon: f64) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::config("epsilon", "must lie in (0, 1e-2]"));
    }
    graph.forward(feed)?;
    let analytic = graph.backward()?;
    let names: Vec<String> = graph.param_names().map(String::from).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        piecewise: graph.piecewise_nodes(),
        entries_checked: 0,
    };
    for name in names {
        let base = graph.param_value(&name).expect("listed parameter").clone();
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe.data_mut()[i] = base.data()[i] + epsilon;
            graph.set_param(&name, &probe)?;
            let plus = graph.forward(feed)?.item();
            probe.data_mut()[i] = base.data()[i] - epsilon;
            graph.set_param(&name, &probe)?;
            let minus = graph.forward(feed)?.item();
            probe.data_mut()[i] = base.data()[i];
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[&name].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
            report.entries_checked += 1;
        }
        graph.set_param(&name, &base)?;
    }
    graph.forward(feed)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(items: &[(&str, Tensor)]) -> Feed {
        items
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        g.square(x);
        assert_eq!(g.forward(&Feed::new()).unwrap().item(), 9.0);
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn elementwise_product() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        let b = g.input("b", &[2]).unwrap();
        g.mul(a, b).unwrap();
        let out = g
            .forward(&feed(&[
                ("a", Tensor::from_slice(&[1.0, 2.0])),
                ("b", Tensor::from_slice(&[3.0, 4.0])),
            ]))
            .unwrap();
        assert_eq!(out.data(), &[3.0, 8.0]);
    }

    #[test]
    fn mse_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_slice(&[0.0, 2.0])).unwrap();
        let y = g.input("y", &[2]).unwrap();
        let d = g.sub(x, y).unwrap();
        let sq = g.square(d);
        g.mean(sq);
        let out = g.forward(&feed(&[("y", Tensor::zeros(&[2]))])).unwrap();
        assert_eq!(out.item(), 2.0);
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param("p", Tensor::scalar(1.0)).unwrap();
        let s = g.mul(c, p).unwrap();
        g.set_output(s);
        g.forward(&Feed::new()).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["p"].item(), 2.0);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.0)).unwrap();
        g.square(x);
        assert_eq!(g.backward(), Err(Error::BackwardBeforeForward));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        let b = g.input("b", &[3]).unwrap();
        match g.add(a, b) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, "add#2"),
            other => panic!("unexpected {other:?}"),
        }
        let x = g.input("x", &[2, 3]).unwrap();
        let y = g.input("y", &[2, 3]).unwrap();
        assert!(g.matmul(x, y).is_err());
    }

    #[test]
    fn unbound_and_misshaped_inputs() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        g.square(a);
        assert_eq!(
            g.forward(&Feed::new()),
            Err(Error::UnboundInput("a".into()))
        );
        assert!(matches!(
            g.forward(&feed(&[("a", Tensor::zeros(&[3]))])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let a = g.input("a", &[1]).unwrap();
        g.log(a);
        let err = g
            .forward(&feed(&[("a", Tensor::from_slice(&[0.0]))]))
            .unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn linear_graph_is_exact_under_central_differences() {
        let mut g = Graph::new();
        let w = g
            .param(
                "w",
                Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap(),
            )
            .unwrap();
        let x = g.input("x", &[3, 1]).unwrap();
        let y = g.matmul(w, x).unwrap();
        g.sum(y);
        let f = feed(&[("x", Tensor::new(&[3, 1], vec![1.0, 2.0, -1.5]).unwrap())]);
        let r = grad_check(&mut g, &f, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.entries_checked, 6);
    }

    #[test]
    fn square_gradient_check() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        g.square(x);
        let r = grad_check(&mut g, &Feed::new(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        g.square(x);
        assert!(grad_check(&mut g, &Feed::new(), 0.0).is_err());
        assert!(grad_check(&mut g, &Feed::new(), 0.1).is_err());
    }

    #[test]
    fn broadcast_and_permute_maps() {
        assert_eq!(broadcast_map(&[1, 2], &[3, 2]), vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(broadcast_map(&[3, 1], &[3, 2]), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(permute_map(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn clamp_is_reported_as_piecewise() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_slice(&[0.5, 2.0])).unwrap();
        let c = g.clamp(x, 0.0, 1.0);
        g.sum(c);
        let r = grad_check(&mut g, &Feed::new(), 1e-6).unwrap();
        assert_eq!(r.piecewise, vec!["clamp#1".to_string()]);
        assert!(r.max_rel_error < 1e-8);
    }
}
