//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` simply walks it in reverse.

use std::sync::Arc;

use super::gemm::gemm;
use super::tensor::{strides, Tensor};
use super::AutodiffError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Mul,
    MatMul,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Gathers rows of the single input table; `shape` is the shape of `ids`.
    EmbeddingLookup { ids: Vec<usize>, shape: Vec<usize> },
    Relu,
    Gelu,
    Tanh,
    /// Inputs: x, gamma, beta.
    LayerNorm,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Sum,
    Mean,
    Scale(f64),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    GradReverse(f64),
    /// Mean token cross-entropy of logits `[.., C]` against class ids; `None` rows are ignored.
    CrossEntropy { targets: Vec<Option<usize>> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::EmbeddingLookup { .. } => "embedding-lookup",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Tanh => "tanh",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::Reshape(_) => "reshape",
            OpKind::Permute(_) => "permute",
            OpKind::GradReverse(_) => "grad-reverse",
            OpKind::CrossEntropy { .. } => "cross-entropy",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MatMul { a: Var, b: Var, shared_b: bool },
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    GradReverse(Var, f64),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaf nodes; persists across `backward` calls.
    leaf_grads: Vec<Option<Tensor>>,
}

type Adjoints = Vec<Option<Vec<f64>>>;

fn adj<'a>(adjoints: &'a mut Adjoints, v: Var, numel: usize) -> &'a mut [f64] {
    adjoints[v.0].get_or_insert_with(|| vec![0.0; numel])
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

    /// Adds a leaf. Leaves with `requires_grad` receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, AutodiffError> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Arc::new(value), op, rg))
    }

    /// Generic entry point: evaluate `kind` on `inputs` and record it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |n: usize| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity { op: kind.name(), expected: n, got: inputs.len() })
            }
        };
        match &kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Transpose => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => {
                arity(1)?;
                self.slice(inputs[0], *axis, *start, *len)
            }
            OpKind::EmbeddingLookup { ids, shape } => {
                arity(1)?;
                self.embedding(inputs[0], ids, shape)
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::LayerNorm => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            OpKind::LogSoftmax => {
                arity(1)?;
                self.log_softmax(inputs[0])
            }
            OpKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpKind::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::Scale(c) => {
                arity(1)?;
                self.scale(inputs[0], *c)
            }
            OpKind::Reshape(shape) => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
            OpKind::Permute(perm) => {
                arity(1)?;
                self.permute(inputs[0], perm)
            }
            OpKind::GradReverse(lambda) => {
                arity(1)?;
                self.grad_reverse(inputs[0], *lambda)
            }
            OpKind::CrossEntropy { targets } => {
                arity(1)?;
                self.cross_entropy(inputs[0], targets)
            }
        }
    }

    // ---- elementwise binary ------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.emit("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.emit("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[.., m, k] x [k, n]` (shared right operand) or batched `[.., m, k] x [.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || AutodiffError::ShapeMismatch { op: "matmul", detail: format!("{sa:?} x {sb:?}") };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let shared_b = sb.len() == 2;
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            gemm(batch * m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
                return Err(mismatch());
            }
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..],
                    false,
                    &tb.data()[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let t = Tensor::from_parts(out_shape, out);
        self.emit("matmul", t, Op::MatMul { a, b, shared_b }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("rank {r} input"),
            });
        }
        let t = transpose_last2(self.value(a));
        self.emit("transpose", t, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a).clone().reshape(shape)?;
        self.emit("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.value(a).shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(AutodiffError::ShapeMismatch { op: "permute", detail: format!("{shape:?} by {perm:?}") });
        }
        let t = permute_tensor(self.value(a), perm);
        self.emit("permute", t, Op::Permute { input: a, perm: perm.to_vec() }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self.value(*inputs.first().ok_or(AutodiffError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::ShapeMismatch { op: "concat", detail: format!("axis {axis} of {base:?}") });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(AutodiffError::ShapeMismatch { op: "concat", detail: format!("{s:?} vs {base:?}") });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, data);
        self.emit("concat", t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}..{}] on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        self.emit("slice", out, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Looks up rows of `table` (`[V, d]`); the result has shape `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(table);
        if t.rank() != 2 || shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding-lookup",
                detail: format!("table {:?}, {} ids as {shape:?}", t.shape(), ids.len()),
            });
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::IndexOutOfRange { op: "embedding-lookup", index: id, bound: vocab });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let out = Tensor::from_parts(out_shape, data);
        self.emit("embedding-lookup", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.emit(name, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` on the way back.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).clone();
        self.emit("grad-reverse", out, Op::GradReverse(a, lambda), &[a])
    }

    // ---- normalisation -----------------------------------------------------

    /// Normalises the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer-norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", t.shape(), self.value(gamma).shape(), self.value(beta).shape()),
            });
        }
        let rows = t.numel() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.emit("layer-norm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.last_dim()) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.emit("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.last_dim()) {
            log_softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.emit("log-softmax", out, Op::LogSoftmax(a), &[a])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.emit("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Fused log-softmax + negative log-likelihood, averaged over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        let c = t.last_dim();
        let rows = t.numel() / c;
        if targets.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross-entropy",
                detail: format!("{rows} rows, {} targets", targets.len()),
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (row, target) in probs.chunks_mut(c).zip(targets) {
            log_softmax_in_place(row);
            if let Some(k) = *target {
                if k >= c {
                    return Err(AutodiffError::IndexOutOfRange { op: "cross-entropy", index: k, bound: c });
                }
                loss -= row[k];
                count += 1;
            }
            row.iter_mut().for_each(|v| *v = v.exp());
        }
        if count == 0 {
            return Err(AutodiffError::EmptyTargets);
        }
        let out = Tensor::scalar(loss / count as f64);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        self.emit("cross-entropy", out, op, &[logits])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut adjoints: Adjoints = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adjoints[i].take() else { continue };
            if let Op::Leaf = node.op {
                adjoints[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut adjoints);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let slot = self.leaf_grads[i].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                if let Some(g) = &adjoints[i] {
                    for (a, b) in slot.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adjoints: &mut Adjoints) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let out_shape = node.value.shape();
                for &x in [a, b] {
                    if needs(x) {
                        let xs = val(x).shape().to_vec();
                        let buf = adj(adjoints, x, val(x).numel());
                        reduce_broadcast(out_shape, &xs, g, buf);
                    }
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    let buf = adj(adjoints, *a, ta.numel());
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        buf[ia] += g[o] * tb.data()[ib];
                    });
                }
                if needs(*b) {
                    let buf = adj(adjoints, *b, tb.numel());
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        buf[ib] += g[o] * ta.data()[ia];
                    });
                }
            }
            Op::MatMul { a, b, shared_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = ta.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = tb.last_dim();
                let batch = ta.numel() / (m * k);
                if *shared_b {
                    if needs(*a) {
                        let buf = adj(adjoints, *a, ta.numel());
                        gemm(batch * m, n, k, g, false, tb.data(), true, buf, true);
                    }
                    if needs(*b) {
                        let buf = adj(adjoints, *b, tb.numel());
                        gemm(k, batch * m, n, ta.data(), true, g, false, buf, true);
                    }
                } else {
                    if needs(*a) {
                        let buf = adj(adjoints, *a, ta.numel());
                        for p in 0..batch {
                            gemm(m, n, k, &g[p * m * n..], false, &tb.data()[p * k * n..], true, &mut buf[p * m * k..], true);
                        }
                    }
                    if needs(*b) {
                        let buf = adj(adjoints, *b, tb.numel());
                        for p in 0..batch {
                            gemm(k, m, n, &ta.data()[p * m * k..], true, &g[p * m * n..], false, &mut buf[p * k * n..], true);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let gt = transpose_last2(&Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()));
                    add_into(adj(adjoints, *a, gt.numel()), gt.data());
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    add_into(adj(adjoints, *a, g.len()), g);
                }
            }
            Op::Permute { input, perm } => {
                if needs(*input) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let gt = permute_tensor(&Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()), &inv);
                    add_into(adj(adjoints, *input, gt.numel()), gt.data());
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let w = val(*v).shape()[*axis];
                    if needs(*v) {
                        let buf = adj(adjoints, *v, val(*v).numel());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * w * inner;
                            add_into(&mut buf[dst..dst + w * inner], &g[src..src + w * inner]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { input, axis, start } => {
                if needs(*input) {
                    let in_shape = val(*input).shape();
                    let len = node.value.shape()[*axis];
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let buf = adj(adjoints, *input, val(*input).numel());
                    for o in 0..outer {
                        let dst = (o * in_shape[*axis] + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut buf[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = val(*table).shape()[1];
                    let buf = adj(adjoints, *table, val(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Relu(a) => self.unary_back(*a, node.value.data(), g, adjoints, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu(a) => self.unary_back(*a, node.value.data(), g, adjoints, |x, _| gelu_grad(x)),
            Op::Tanh(a) => self.unary_back(*a, node.value.data(), g, adjoints, |_, y| 1.0 - y * y),
            Op::Log(a) => self.unary_back(*a, node.value.data(), g, adjoints, |x, _| 1.0 / x),
            Op::Exp(a) => self.unary_back(*a, node.value.data(), g, adjoints, |_, y| y),
            Op::Scale(a, c) => {
                let c = *c;
                self.unary_back(*a, node.value.data(), g, adjoints, |_, _| c)
            }
            Op::GradReverse(a, lambda) => {
                let l = *lambda;
                self.unary_back(*a, node.value.data(), g, adjoints, |_, _| -l)
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let gm = val(*gamma).data();
                if needs(*gamma) {
                    let buf = adj(adjoints, *gamma, d);
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            buf[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let buf = adj(adjoints, *beta, d);
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                }
                if needs(*x) {
                    let buf = adj(adjoints, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gm[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xh[j];
                        }
                        let scale = rstd[r] / d as f64;
                        for j in 0..d {
                            buf[r * d + j] += scale * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let buf = adj(adjoints, *a, y.len());
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let buf = adj(adjoints, *a, y.len());
                    for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            br[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let buf = adj(adjoints, *a, val(*a).numel());
                    buf.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = val(*a).numel();
                    let buf = adj(adjoints, *a, n);
                    let s = g[0] / n as f64;
                    buf.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if needs(*logits) {
                    let c = val(*logits).last_dim();
                    let s = g[0] / *count as f64;
                    let buf = adj(adjoints, *logits, probs.len());
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(k) = *target {
                            let row = &probs[r * c..(r + 1) * c];
                            let br = &mut buf[r * c..(r + 1) * c];
                            for j in 0..c {
                                br[j] += s * row[j];
                            }
                            br[k] -= s;
                        }
                    }
                }
            }
        }
    }

    fn unary_back(&self, a: Var, y: &[f64], g: &[f64], adjoints: &mut Adjoints, dfdx: impl Fn(f64, f64) -> f64) {
        let na = &self.nodes[a.0];
        if !na.requires_grad {
            return;
        }
        let x = na.value.data();
        let buf = adj(adjoints, a, x.len());
        for j in 0..x.len() {
            buf[j] += g[j] * dfdx(x[j], y[j]);
        }
    }
}

// ---- kernels ----------------------------------------------------------------

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (m * n);
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0; rank];
    let mut off = 0;
    let data = t.data();
    // Innermost axis copied as a strided run.
    let last = out_shape[rank - 1];
    let last_stride = src_strides[rank - 1];
    let outer = t.numel() / last;
    for _ in 0..outer {
        for j in 0..last {
            out.push(data[off + j * last_stride]);
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { s[i - pad] })
        .collect()
}

fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if a == out && b == out {
        for o in 0..numel {
            f(o, o, o);
        }
        return;
    }
    let nb: usize = b.iter().product();
    if a == out && out.ends_with(b) {
        for o in 0..numel {
            f(o, o, o % nb);
        }
        return;
    }
    let na: usize = a.iter().product();
    if b == out && out.ends_with(a) {
        for o in 0..numel {
            f(o, o % na, o);
        }
        return;
    }
    let (sa, sb) = (broadcast_strides(a, out), broadcast_strides(b, out));
    let rank = out.len();
    let mut idx = vec![0; rank];
    let (mut ia, mut ib) = (0, 0);
    for o in 0..numel {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to the broadcast operand shape `target`.
fn reduce_broadcast(out: &[usize], target: &[usize], g: &[f64], buf: &mut [f64]) {
    if out == target {
        add_into(buf, g);
    } else if out.ends_with(target) {
        for chunk in g.chunks(buf.len()) {
            add_into(buf, chunk);
        }
    } else {
        for_each_broadcast(out, target, target, |o, it, _| buf[it] += g[o]);
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AutodiffError> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    })?;
    let mut data = vec![0.0; out_shape.iter().product()];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| data[o] = f(da[ia], db[ib]));
    Ok(Tensor::from_parts(out_shape, data))
}
