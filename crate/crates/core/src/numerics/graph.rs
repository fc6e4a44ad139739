//! Static computation graphs with cached forward values and reverse-mode
//! gradients.
//!
//! A [`Graph`] is a symbolic, shape-agnostic description: nodes are appended
//! through builder methods that only accept already existing node ids, so
//! insertion order is always a valid topological order. Shapes are resolved
//! when [`Graph::forward`] binds concrete tensors.
//!
//! Evaluation state lives in [`Forward`], not in the graph, which makes a
//! built graph immutable and shareable. One `Forward`/[`Graph::backward`]
//! pair runs on one thread; any number of them may run concurrently over the
//! same borrowed [`ParamStore`]. Mutating parameters (see
//! [`adam_step`](super::adam_step)) needs `&mut ParamStore`, so the borrow
//! checker rules out updates while a forward pass holds the store.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::gemm::{gemm, MatRef};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Externally fed tensor; gradients are reported only if `grad` is set.
    Input { name: String, grad: bool },
    /// Trainable leaf looked up by name in the parameter store.
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise maximum; ties route the gradient to the first operand.
    Maximum(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// `[m, k] x [k, n]`.
    MatMul(NodeId, NodeId),
    /// `[m, n] + [n]` broadcast over rows.
    AddRowBias(NodeId, NodeId),
    /// Stride 1, zero padding `k / 2`, odd square kernel.
    /// `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Silu(NodeId),
    /// Normalizes each sample over groups of consecutive channels (no affine).
    GroupNorm { x: NodeId, groups: usize },
    /// `[B, C, ...] + [B, C]` broadcast over trailing axes.
    ChannelAdd(NodeId, NodeId),
    /// `[B, C, ...] * [B, C]` broadcast over trailing axes.
    ChannelMul(NodeId, NodeId),
    /// 2x2 average pooling of `[B, C, H, W]`.
    AvgPool2(NodeId),
    /// 2x nearest-neighbour upsampling of `[B, C, H, W]`.
    Upsample2(NodeId),
    /// A `0` in the target shape is inferred from the element count.
    Reshape(NodeId, Vec<usize>),
    /// Concatenation along axis 1.
    Concat(Vec<NodeId>),
    /// Mean of all entries, shape `[1]`.
    Mean(NodeId),
    /// Sum of squared entries, shape `[1]`.
    SumSquares(NodeId),
    /// Per-row mean of squares: `[B, ...] -> [B]`.
    RowMeanSquares(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Maximum(..) => "maximum",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Silu(_) => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::ChannelAdd(..) => "channel_add",
            Op::ChannelMul(..) => "channel_mul",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Upsample2(_) => "upsample2",
            Op::Reshape(..) => "reshape",
            Op::Concat(_) => "concat",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::RowMeanSquares(_) => "row_mean_squares",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Maximum(a, b)
            | Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::ChannelAdd(a, b)
            | Op::ChannelMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::GroupNorm { x: a, .. }
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::Reshape(a, _)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::RowMeanSquares(a) => vec![*a],
            Op::Concat(v) => v.clone(),
        }
    }
}

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    outputs: Vec<(String, NodeId)>,
}

macro_rules! binary_builder {
    ($($name:ident => $variant:ident),* $(,)?) => {
        $(pub fn $name(&mut self, a: NodeId, b: NodeId) -> NodeId {
            self.push(Op::$variant(a, b))
        })*
    };
}

macro_rules! unary_builder {
    ($($name:ident => $variant:ident),* $(,)?) => {
        $(pub fn $name(&mut self, a: NodeId) -> NodeId {
            self.push(Op::$variant(a))
        })*
    };
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.ops[id.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(
                operand.0 < self.ops.len(),
                "operand {operand:?} does not precede the new node"
            );
        }
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            grad: false,
        })
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, name: &str) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            grad: true,
        })
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param(name.to_string()))
    }

    binary_builder! {
        add => Add, sub => Sub, mul => Mul, maximum => Maximum,
        matmul => MatMul, add_row_bias => AddRowBias,
        channel_add => ChannelAdd, channel_mul => ChannelMul,
    }

    unary_builder! {
        relu => Relu, silu => Silu, avg_pool2 => AvgPool2, upsample2 => Upsample2,
        mean => Mean, sum_squares => SumSquares, row_mean_squares => RowMeanSquares,
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        self.push(Op::AddScalar(a, value))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Conv2d { x, w, b })
    }

    pub fn group_norm(&mut self, x: NodeId, groups: usize) -> NodeId {
        assert!(groups > 0);
        self.push(Op::GroupNorm { x, groups })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        self.push(Op::Concat(parts.to_vec()))
    }

    /// `x @ w + b` for `x: [m, k]`, parameters `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    pub fn conv(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.conv2d(x, w, b)
    }

    /// Name a node so it can be retrieved from a [`Forward`].
    pub fn output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    /// Evaluate every node in insertion order.
    pub fn forward<'a>(
        &'a self,
        params: &'a ParamStore,
        inputs: &[(&str, &'a Tensor)],
    ) -> Result<Forward<'a>> {
        let feeds: HashMap<&str, &Tensor> = inputs.iter().copied().collect();
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.ops.len());
        for (index, op) in self.ops.iter().enumerate() {
            let value = match op {
                Op::Input { name, .. } => Cow::Borrowed(
                    *feeds
                        .get(name.as_str())
                        .ok_or_else(|| Error::Unbound(name.clone()))?,
                ),
                Op::Param(name) => Cow::Borrowed(
                    params
                        .get(name)
                        .ok_or_else(|| Error::Unbound(name.clone()))?,
                ),
                _ => {
                    let get = |id: NodeId| -> &Tensor { values[id.0].as_ref() };
                    let out = eval(op, &get).map_err(|detail| Error::Shape {
                        node: index,
                        op: op.kind(),
                        detail,
                    })?;
                    if !out.all_finite() {
                        return Err(Error::NonFinite {
                            node: index,
                            op: op.kind(),
                        });
                    }
                    Cow::Owned(out)
                }
            };
            values.push(value);
        }
        Ok(Forward {
            graph: self,
            values,
        })
    }

    /// Gradients of the scalar `output` with respect to every parameter and
    /// every gradient-enabled input.
    pub fn backward(&self, fwd: &Forward<'_>, output: NodeId) -> Result<Gradients> {
        self.backward_filtered(fwd, output, |_| true)
    }

    /// As [`Graph::backward`], restricted to parameters accepted by
    /// `trainable`; frozen branches are not differentiated at all.
    pub fn backward_filtered(
        &self,
        fwd: &Forward<'_>,
        output: NodeId,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Gradients> {
        if !std::ptr::eq(fwd.graph, self) || fwd.values.len() != self.ops.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let out_value = &fwd.values[output.0];
        if !out_value.is_scalar() {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out_value.shape().to_vec(),
            });
        }
        self.backprop(fwd, output, Tensor::full(out_value.shape(), 1.0), trainable)
    }

    /// Vector-Jacobian product: gradients of `sum(seed * output)` for a
    /// node of any shape.
    pub fn backward_seeded(
        &self,
        fwd: &Forward<'_>,
        output: NodeId,
        seed: &Tensor,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Gradients> {
        if !std::ptr::eq(fwd.graph, self) || fwd.values.len() != self.ops.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let out_value = &fwd.values[output.0];
        if seed.shape() != out_value.shape() {
            return Err(Error::Shape {
                node: output.0,
                op: "backward_seeded",
                detail: format!("seed {:?} vs output {:?}", seed.shape(), out_value.shape()),
            });
        }
        self.backprop(fwd, output, seed.clone(), trainable)
    }

    fn backprop(
        &self,
        fwd: &Forward<'_>,
        output: NodeId,
        seed: Tensor,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Gradients> {
        let n = self.ops.len();
        let mut needs = vec![false; n];
        for (i, op) in self.ops.iter().enumerate() {
            needs[i] = match op {
                Op::Param(name) => trainable(name),
                Op::Input { grad, .. } => *grad,
                other => other.operands().iter().any(|o| needs[o.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = &self.ops[i];
            if matches!(op, Op::Input { .. } | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            let val = |id: NodeId| -> &Tensor { fwd.values[id.0].as_ref() };
            let contributions = vjp(op, &g, fwd.values[i].as_ref(), &val, &needs);
            for (id, contrib) in contributions {
                if !contrib.all_finite() {
                    return Err(Error::NonFinite {
                        node: i,
                        op: op.kind(),
                    });
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut params = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            let leaf = match op {
                Op::Param(name) if needs[i] => (&mut params, name),
                Op::Input { name, grad: true } => (&mut inputs, name),
                _ => continue,
            };
            let g = grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(fwd.values[i].shape()));
            match leaf.0.get_mut(leaf.1) {
                Some(acc) => Tensor::axpy(acc, 1.0, &g),
                None => {
                    leaf.0.insert(leaf.1.clone(), g);
                }
            }
        }
        Ok(Gradients { params, inputs })
    }
}

/// Cached node values of one forward evaluation.
pub struct Forward<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
}

impl<'a> Forward<'a> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref()
    }

    /// Value of a node registered with [`Graph::output`].
    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.graph.output_id(name).map(|id| self.value(id))
    }

    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.graph
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.value(*id).clone()))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    /// `self += alpha * other` over parameter gradients, inserting missing
    /// entries. Iteration follows name order, so repeated accumulation is
    /// deterministic.
    pub fn accumulate(&mut self, alpha: f64, other: &Gradients) {
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(acc) => acc.axpy(alpha, g),
                None => {
                    let mut t = Tensor::zeros(g.shape());
                    t.axpy(alpha, g);
                    self.params.insert(name.clone(), t);
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward kernels

type ShapeResult<T> = std::result::Result<T, String>;

fn same_shape(a: &Tensor, b: &Tensor) -> ShapeResult<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(format!("operands {:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> ShapeResult<Tensor> {
    same_shape(a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::new(a.shape().to_vec(), data).expect("shape preserved"))
}

fn dims4(t: &Tensor) -> ShapeResult<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(format!("expected [B, C, H, W], got {s:?}")),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn eval<'t>(op: &Op, get: &dyn Fn(NodeId) -> &'t Tensor) -> ShapeResult<Tensor> {
    Ok(match op {
        Op::Input { .. } | Op::Param(_) => unreachable!("leaves are bound, not evaluated"),
        Op::Add(a, b) => zip_map(get(*a), get(*b), |x, y| x + y)?,
        Op::Sub(a, b) => zip_map(get(*a), get(*b), |x, y| x - y)?,
        Op::Mul(a, b) => zip_map(get(*a), get(*b), |x, y| x * y)?,
        Op::Maximum(a, b) => zip_map(get(*a), get(*b), f64::max)?,
        Op::Scale(a, c) => get(*a).map(|x| c * x),
        Op::AddScalar(a, c) => get(*a).map(|x| x + c),
        Op::MatMul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(format!("matmul needs 2-d operands, got {:?} x {:?}", a.shape(), b.shape()));
            };
            if k != k2 {
                return Err(format!("inner dims {k} vs {k2}"));
            }
            let mut out = vec![0.0; m * n];
            gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, 0.0);
            Tensor::new(vec![m, n], out).expect("shape")
        }
        Op::AddRowBias(x, b) => {
            let (x, b) = (get(*x), get(*b));
            let n = *x.shape().last().unwrap();
            if x.shape().len() != 2 || b.shape() != [n] {
                return Err(format!("row bias {:?} + {:?}", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
            }
            out
        }
        Op::Conv2d { x, w, b } => conv2d_forward(get(*x), get(*w), get(*b))?,
        Op::Relu(a) => get(*a).map(|x| x.max(0.0)),
        Op::Silu(a) => get(*a).map(|x| x * sigmoid(x)),
        Op::GroupNorm { x, groups } => group_norm_forward(get(*x), *groups)?.0,
        Op::ChannelAdd(x, v) => channel_broadcast(get(*x), get(*v), |a, b| a + b)?,
        Op::ChannelMul(x, v) => channel_broadcast(get(*x), get(*v), |a, b| a * b)?,
        Op::AvgPool2(x) => {
            let x = get(*x);
            let (b, c, h, w) = dims4(x)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(format!("avg_pool2 needs even spatial dims, got {h}x{w}"));
            }
            let (ho, wo) = (h / 2, w / 2);
            let src = x.data();
            let mut out = vec![0.0; b * c * ho * wo];
            for plane in 0..b * c {
                let s = &src[plane * h * w..(plane + 1) * h * w];
                let o = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let p = 2 * i * w + 2 * j;
                        o[i * wo + j] = 0.25 * (s[p] + s[p + 1] + s[p + w] + s[p + w + 1]);
                    }
                }
            }
            Tensor::new(vec![b, c, ho, wo], out).expect("shape")
        }
        Op::Upsample2(x) => {
            let x = get(*x);
            let (b, c, h, w) = dims4(x)?;
            let (ho, wo) = (2 * h, 2 * w);
            let src = x.data();
            let mut out = vec![0.0; b * c * ho * wo];
            for plane in 0..b * c {
                let s = &src[plane * h * w..(plane + 1) * h * w];
                let o = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        o[i * wo + j] = s[(i / 2) * w + j / 2];
                    }
                }
            }
            Tensor::new(vec![b, c, ho, wo], out).expect("shape")
        }
        Op::Reshape(x, shape) => {
            let x = get(*x);
            let shape = resolve_shape(shape, x.len())?;
            x.clone().reshaped(&shape).map_err(|e| e.to_string())?
        }
        Op::Concat(parts) => {
            let parts: Vec<&Tensor> = parts.iter().map(|p| get(*p)).collect();
            concat_forward(&parts)?
        }
        Op::Mean(x) => {
            let x = get(*x);
            Tensor::scalar(x.sum() / x.len() as f64)
        }
        Op::SumSquares(x) => Tensor::scalar(get(*x).data().iter().map(|v| v * v).sum()),
        Op::RowMeanSquares(x) => {
            let x = get(*x);
            let rows = x.shape()[0];
            let inner = x.len() / rows;
            let data = x
                .data()
                .chunks(inner)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>() / inner as f64)
                .collect();
            Tensor::new(vec![rows], data).expect("shape")
        }
    })
}

fn resolve_shape(shape: &[usize], len: usize) -> ShapeResult<Vec<usize>> {
    let unknown = shape.iter().filter(|&&d| d == 0).count();
    let known: usize = shape.iter().filter(|&&d| d != 0).product();
    match unknown {
        0 => Ok(shape.to_vec()),
        1 if known > 0 && len % known == 0 => Ok(shape
            .iter()
            .map(|&d| if d == 0 { len / known } else { d })
            .collect()),
        _ => Err(format!("cannot resolve reshape {shape:?} for {len} elements")),
    }
}

fn channel_broadcast(x: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> ShapeResult<Tensor> {
    let s = x.shape();
    if s.len() < 2 || v.shape() != [s[0], s[1]] {
        return Err(format!("channel broadcast {:?} with {:?}", s, v.shape()));
    }
    let inner: usize = s[2..].iter().product();
    let mut out = x.clone();
    for (chunk, &vv) in out.data_mut().chunks_mut(inner).zip(v.data()) {
        chunk.iter_mut().for_each(|a| *a = f(*a, vv));
    }
    Ok(out)
}

fn concat_geometry(parts: &[&Tensor]) -> ShapeResult<(usize, Vec<usize>, usize)> {
    let first = parts[0].shape();
    if first.len() < 2 {
        return Err(format!("concat needs rank >= 2, got {first:?}"));
    }
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
            return Err(format!("concat operand {s:?} incompatible with {first:?}"));
        }
        widths.push(s[1]);
    }
    let inner: usize = first[2..].iter().product();
    Ok((first[0], widths, inner))
}

fn concat_forward(parts: &[&Tensor]) -> ShapeResult<Tensor> {
    let (outer, widths, inner) = concat_geometry(parts)?;
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for b in 0..outer {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[b * w * inner..(b + 1) * w * inner]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[1] = total;
    Ok(Tensor::new(shape, data).expect("shape"))
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn conv_geometry(x: &Tensor, w: &Tensor, b: &Tensor) -> ShapeResult<ConvGeom> {
    let (batch, cin, h, wd) = dims4(x)?;
    let &[cout, cin2, k, k2] = w.shape() else {
        return Err(format!("conv weight must be [Co, Ci, k, k], got {:?}", w.shape()));
    };
    if cin != cin2 || k != k2 || k % 2 == 0 || b.shape() != [cout] {
        return Err(format!(
            "conv x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    Ok(ConvGeom {
        batch,
        cin,
        cout,
        h,
        w: wd,
        k,
    })
}

/// Valid output-column range `[lo, hi)` for kernel offset `d = kx - pad`,
/// i.e. columns whose source `x + d` lies inside `[0, w)`.
fn valid_range(d: isize, w: isize) -> (usize, usize) {
    ((-d).max(0) as usize, (w - d).min(w).max(0) as usize)
}

/// Unfold one `[Ci, H, W]` sample into `[Ci*k*k, H*W]` columns.
fn im2col(src: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let (hu, wu) = (g.h, g.w);
    let hw = hu * wu;
    for ci in 0..g.cin {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * g.k + ky as usize) * g.k + kx as usize;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx - pad;
                let (lo, hi) = valid_range(dx, w);
                for y in 0..h {
                    let sy = y + ky - pad;
                    let drow = &mut dst[y as usize * wu..(y as usize + 1) * wu];
                    if sy < 0 || sy >= h || lo >= hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * wu..(sy as usize + 1) * wu];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into a `[Ci, H, W]` sample.
fn col2im(col: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let wu = g.w;
    let hw = g.h * g.w;
    for ci in 0..g.cin {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * g.k + ky as usize) * g.k + kx as usize;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx - pad;
                let (lo, hi) = valid_range(dx, w);
                if lo >= hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let prow = &mut plane[sy as usize * wu + s0..sy as usize * wu + s0 + (hi - lo)];
                    let crow = &src[y as usize * wu + lo..y as usize * wu + hi];
                    for (p, c) in prow.iter_mut().zip(crow) {
                        *p += c;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> ShapeResult<Tensor> {
    let g = conv_geometry(x, w, b)?;
    let hw = g.h * g.w;
    let ckk = g.cin * g.k * g.k;
    let mut col = vec![0.0; ckk * hw];
    let mut out = vec![0.0; g.batch * g.cout * hw];
    let wmat = MatRef::new(w.data(), g.cout, ckk);
    for s in 0..g.batch {
        im2col(&x.data()[s * g.cin * hw..(s + 1) * g.cin * hw], &g, &mut col);
        let o = &mut out[s * g.cout * hw..(s + 1) * g.cout * hw];
        gemm(wmat, MatRef::new(&col, ckk, hw), o, 0.0);
        for (co, chunk) in o.chunks_mut(hw).enumerate() {
            let bias = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(Tensor::new(vec![g.batch, g.cout, g.h, g.w], out).expect("shape"))
}

/// Returns the normalized output and per-(sample, group) inverse std.
fn group_norm_forward(x: &Tensor, groups: usize) -> ShapeResult<(Tensor, Vec<f64>)> {
    let s = x.shape();
    if s.len() < 2 || s[1] % groups != 0 {
        return Err(format!("group_norm({groups}) on {s:?}"));
    }
    let group_len = x.len() / (s[0] * groups);
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(s[0] * groups);
    for chunk in out.data_mut().chunks_mut(group_len) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    Ok((out, inv_std))
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products

fn vjp<'t>(
    op: &Op,
    g: &Tensor,
    out: &Tensor,
    val: &dyn Fn(NodeId) -> &'t Tensor,
    needs: &[bool],
) -> Vec<(NodeId, Tensor)> {
    let want = |id: &NodeId| needs[id.0];
    let mut res = Vec::new();
    let mut push = |id: NodeId, t: Tensor| res.push((id, t));
    match op {
        Op::Input { .. } | Op::Param(_) => {}
        Op::Add(a, b) => {
            if want(a) {
                push(*a, g.clone());
            }
            if want(b) {
                push(*b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                push(*a, g.clone());
            }
            if want(b) {
                push(*b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                push(*a, zip_map(g, val(*b), |x, y| x * y).unwrap());
            }
            if want(b) {
                push(*b, zip_map(g, val(*a), |x, y| x * y).unwrap());
            }
        }
        Op::Maximum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if want(a) {
                let d = g.data().iter().zip(av.data().iter().zip(bv.data()));
                let data = d.map(|(&gv, (&x, &y))| if x >= y { gv } else { 0.0 }).collect();
                push(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            if want(b) {
                let d = g.data().iter().zip(av.data().iter().zip(bv.data()));
                let data = d.map(|(&gv, (&x, &y))| if x >= y { 0.0 } else { gv }).collect();
                push(*b, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
        }
        Op::Scale(a, c) => {
            if want(a) {
                push(*a, g.map(|v| c * v));
            }
        }
        Op::AddScalar(a, _) => {
            if want(a) {
                push(*a, g.clone());
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if want(a) {
                let mut ga = vec![0.0; m * k];
                gemm(MatRef::new(g.data(), m, n), MatRef::new(bv.data(), k, n).t(), &mut ga, 0.0);
                push(*a, Tensor::new(vec![m, k], ga).unwrap());
            }
            if want(b) {
                let mut gb = vec![0.0; k * n];
                gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(g.data(), m, n), &mut gb, 0.0);
                push(*b, Tensor::new(vec![k, n], gb).unwrap());
            }
        }
        Op::AddRowBias(x, b) => {
            if want(x) {
                push(*x, g.clone());
            }
            if want(b) {
                let n = g.shape()[1];
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                push(*b, Tensor::from_vec(gb));
            }
        }
        Op::Conv2d { x, w, b } => {
            let (xv, wv, bv) = (val(*x), val(*w), val(*b));
            let geom = conv_geometry(xv, wv, bv).unwrap();
            let hw = geom.h * geom.w;
            let ckk = geom.cin * geom.k * geom.k;
            let wmat = MatRef::new(wv.data(), geom.cout, ckk);
            let mut col = vec![0.0; ckk * hw];
            let mut dcol = vec![0.0; ckk * hw];
            let mut gw = vec![0.0; geom.cout * ckk];
            let mut gx = if want(x) { vec![0.0; xv.len()] } else { vec![] };
            for s in 0..geom.batch {
                let gs = &g.data()[s * geom.cout * hw..(s + 1) * geom.cout * hw];
                let gmat = MatRef::new(gs, geom.cout, hw);
                if want(w) {
                    im2col(&xv.data()[s * geom.cin * hw..(s + 1) * geom.cin * hw], &geom, &mut col);
                    gemm(gmat, MatRef::new(&col, ckk, hw).t(), &mut gw, 1.0);
                }
                if want(x) {
                    gemm(wmat.t(), gmat, &mut dcol, 0.0);
                    col2im(&dcol, &geom, &mut gx[s * geom.cin * hw..(s + 1) * geom.cin * hw]);
                }
            }
            if want(x) {
                push(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            if want(w) {
                push(*w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
            }
            if want(b) {
                let mut gb = vec![0.0; geom.cout];
                for (i, chunk) in g.data().chunks(hw).enumerate() {
                    gb[i % geom.cout] += chunk.iter().sum::<f64>();
                }
                push(*b, Tensor::from_vec(gb));
            }
        }
        Op::Relu(a) => {
            if want(a) {
                push(*a, zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap());
            }
        }
        Op::Silu(a) => {
            if want(a) {
                let d = zip_map(g, val(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                push(*a, d.unwrap());
            }
        }
        Op::GroupNorm { x, groups } => {
            if want(x) {
                let (_, inv_std) = group_norm_forward(val(*x), *groups).unwrap();
                let group_len = out.len() / inv_std.len();
                let mut gx = vec![0.0; out.len()];
                let chunks = gx
                    .chunks_mut(group_len)
                    .zip(g.data().chunks(group_len))
                    .zip(out.data().chunks(group_len))
                    .zip(&inv_std);
                for (((dst, gy), y), &inv) in chunks {
                    let n = group_len as f64;
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gy).zip(y) {
                        *d = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                push(*x, Tensor::new(out.shape().to_vec(), gx).unwrap());
            }
        }
        Op::ChannelAdd(x, v) => {
            if want(x) {
                push(*x, g.clone());
            }
            if want(v) {
                let vv = val(*v);
                let inner = g.len() / vv.len();
                let data = g.data().chunks(inner).map(|c| c.iter().sum()).collect();
                push(*v, Tensor::new(vv.shape().to_vec(), data).unwrap());
            }
        }
        Op::ChannelMul(x, v) => {
            let (xv, vv) = (val(*x), val(*v));
            let inner = g.len() / vv.len();
            if want(x) {
                push(*x, channel_broadcast(g, vv, |a, b| a * b).unwrap());
            }
            if want(v) {
                let data = g
                    .data()
                    .chunks(inner)
                    .zip(xv.data().chunks(inner))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                push(*v, Tensor::new(vv.shape().to_vec(), data).unwrap());
            }
        }
        Op::AvgPool2(x) => {
            if want(x) {
                let xv = val(*x);
                let (_, _, h, w) = dims4(xv).unwrap();
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; xv.len()];
                for (plane, gp) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = 0.25 * gp[(i / 2) * wo + j / 2];
                        }
                    }
                }
                push(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
        }
        Op::Upsample2(x) => {
            if want(x) {
                let xv = val(*x);
                let (_, _, h, w) = dims4(xv).unwrap();
                let wo = 2 * w;
                let mut gx = vec![0.0; xv.len()];
                for (plane, gp) in g.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let p = 2 * i * wo + 2 * j;
                            dst[i * w + j] = gp[p] + gp[p + 1] + gp[p + wo] + gp[p + wo + 1];
                        }
                    }
                }
                push(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
        }
        Op::Reshape(x, _) => {
            if want(x) {
                push(*x, g.clone().reshaped(val(*x).shape()).unwrap());
            }
        }
        Op::Concat(parts) => {
            let vals: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
            let (outer, widths, inner) = concat_geometry(&vals).unwrap();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for ((p, &w), v) in parts.iter().zip(&widths).zip(&vals) {
                if want(p) {
                    let mut data = Vec::with_capacity(v.len());
                    for b in 0..outer {
                        let start = (b * total + offset) * inner;
                        data.extend_from_slice(&g.data()[start..start + w * inner]);
                    }
                    push(*p, Tensor::new(v.shape().to_vec(), data).unwrap());
                }
                offset += w;
            }
        }
        Op::Mean(x) => {
            if want(x) {
                let xv = val(*x);
                push(*x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
        }
        Op::SumSquares(x) => {
            if want(x) {
                let gv = g.item();
                push(*x, val(*x).map(|v| 2.0 * v * gv));
            }
        }
        Op::RowMeanSquares(x) => {
            if want(x) {
                let xv = val(*x);
                let rows = xv.shape()[0];
                let inner = xv.len() / rows;
                let mut gx = xv.clone();
                for (chunk, &gr) in gx.data_mut().chunks_mut(inner).zip(g.data()) {
                    let f = 2.0 * gr / inner as f64;
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                push(*x, gx);
            }
        }
    }
    res
}
