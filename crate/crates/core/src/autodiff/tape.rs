//! Computation tape: records primitive ops in execution order and replays
//! them in reverse to accumulate gradients.
//!
//! Every op checks its operand shapes and rejects non-finite outputs, so a
//! NaN or Inf never silently propagates into a backward pass.

use std::cell::Cell;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the primitive ops, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    ConcatCols,
    SliceCols,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu,
    Exp,
    Log,
    LogSigmoid,
    Sum,
    Mean,
    SoftmaxXent,
    SquaredError,
    GatherRows,
    MaskRows,
    BatchNorm,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ConcatCols => "concat",
            OpKind::SliceCols => "slice",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxXent => "softmax_xent",
            OpKind::SquaredError => "squared_error",
            OpKind::GatherRows => "gather_rows",
            OpKind::MaskRows => "mask_rows",
            OpKind::BatchNorm => "batch_norm",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_OPS: [OpKind; 23] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::ConcatCols,
    OpKind::SliceCols,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Relu,
    OpKind::LeakyRelu,
    OpKind::Exp,
    OpKind::Log,
    OpKind::LogSigmoid,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::SoftmaxXent,
    OpKind::SquaredError,
    OpKind::GatherRows,
    OpKind::MaskRows,
    OpKind::BatchNorm,
];

thread_local! {
    static GRAD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Deliberately corrupts the backward rule of one op on the current thread
/// until the returned guard is dropped. Used to prove that the gradient
/// battery catches broken derivatives.
pub fn inject_gradient_fault(kind: OpKind) -> FaultGuard {
    let prev = GRAD_FAULT.with(|f| f.replace(Some(kind)));
    FaultGuard { prev }
}

pub struct FaultGuard {
    prev: Option<OpKind>,
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        GRAD_FAULT.with(|f| f.set(self.prev));
    }
}

/// Per-feature statistics of a training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    LogSigmoid(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SquaredError(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    MaskRows {
        keep: Vec<bool>,
        new: NodeId,
        old: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::LogSigmoid(..) => OpKind::LogSigmoid,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::SquaredError(..) => OpKind::SquaredError,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::MaskRows { .. } => OpKind::MaskRows,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; all zeros when the loss
    /// does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ))
    }
}

/// Whether `b` is a `[1, n]` row that broadcasts over the rows of `a`.
fn row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    a.is_matrix() && b.is_matrix() && b.rows() == 1 && a.rows() > 1 && b.cols() == a.cols()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        let kind = op.kind();
        check_finite(kind.name(), &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        require_matrix("matmul", av)?;
        require_matrix("matmul", bv)?;
        if av.cols() != bv.rows() {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)
        } else if row_broadcast(av, bv) {
            let cols = av.cols();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % cols]))
                .collect();
            Tensor::new(av.shape().to_vec(), data)
        } else {
            Err(Error::shape(
                name,
                format!("incompatible shapes {:?} and {:?}", av.shape(), bv.shape()),
            ))
        }
    }

    /// Elementwise sum; `b` may also be a `[1, n]` row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product; `b` may also be a `[1, n]` row broadcast over `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x + offset);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "nothing to concatenate"));
        };
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            require_matrix("concat", v)?;
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("row count {} differs from {}", v.rows(), rows),
                ));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        require_matrix("slice", av)?;
        if start >= end || end > av.cols() {
            return Err(Error::shape(
                "slice",
                format!("columns {start}..{end} out of range for {:?}", av.shape()),
            ));
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&av.row_slice(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![rows, end - start], out)?,
            Op::SliceCols(a, start),
            rg,
        )
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `sum_i weights[i] * (-log softmax(logits[i])[targets[i]])`.
    ///
    /// Uses max-subtraction, so the log-sum-exp stays finite for any finite
    /// logits. A weight of zero removes a row (padding) exactly.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        require_matrix("softmax_xent", lv)?;
        let (rows, classes) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "softmax_xent",
                format!(
                    "{rows} rows but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TargetOutOfRange { target: t, classes });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for r in 0..rows {
            let row = lv.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= z;
            }
            if weights[r] != 0.0 {
                let lse = max + z.ln();
                total += weights[r] * (lse - row[targets[r]]);
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `sum((a - b)^2)` over all elements.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "squared_error",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s), Op::SquaredError(a, b), rg)
    }

    /// Selects rows of a `[n, d]` table, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        require_matrix("gather_rows", tv)?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no rows requested"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                classes: tv.rows(),
            });
        }
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row_slice(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        )
    }

    /// Row `r` of the result is `new[r]` where `keep[r]`, else `old[r]`.
    /// Carries recurrent state unchanged across padded time steps.
    pub fn mask_rows(&mut self, keep: &[bool], new: NodeId, old: NodeId) -> Result<NodeId> {
        let (nv, ov) = (self.value(new), self.value(old));
        require_matrix("mask_rows", nv)?;
        if nv.shape() != ov.shape() || keep.len() != nv.rows() {
            return Err(Error::shape(
                "mask_rows",
                format!(
                    "{:?} vs {:?} with {} flags",
                    nv.shape(),
                    ov.shape(),
                    keep.len()
                ),
            ));
        }
        let mut out = Vec::with_capacity(nv.len());
        for (r, &k) in keep.iter().enumerate() {
            out.extend_from_slice(if k { nv.row_slice(r) } else { ov.row_slice(r) });
        }
        let shape = nv.shape().to_vec();
        let rg = self.rg(new) || self.rg(old);
        self.push(
            Tensor::new(shape, out)?,
            Op::MaskRows {
                keep: keep.to_vec(),
                new,
                old,
            },
            rg,
        )
    }

    /// Training-mode batch normalization over the rows of `x` (`[batch,
    /// features]`) with `[1, features]` scale and shift.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let xv = self.value(x);
        require_matrix("batch_norm", xv)?;
        let (b, f) = (xv.rows(), xv.cols());
        if b < 2 {
            return Err(Error::InvalidInput(
                "batch_norm in train mode needs a batch of at least 2".into(),
            ));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, f] {
                return Err(Error::shape(
                    "batch_norm",
                    format!(
                        "parameter shape {:?}, expected [1, {f}]",
                        self.value(p).shape()
                    ),
                ));
            }
        }
        let mut mean = vec![0.0; f];
        for r in 0..b {
            for (m, &v) in mean.iter_mut().zip(xv.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; f];
        for r in 0..b {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; b * f];
        let mut out = vec![0.0; b * f];
        for r in 0..b {
            for c in 0..f {
                let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                xhat[r * f + c] = h;
                out[r * f + c] = gv[c] * h + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            Tensor::new(vec![b, f], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((
            id,
            BatchStats {
                mean,
                var,
                count: b,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. The tape is left untouched, so the
    /// same recording can be differentiated any number of times.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let fault = GRAD_FAULT.with(Cell::get);
        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Accumulator {
                grads: &mut grads,
                shapes: &shapes,
                nodes: &self.nodes,
                fault: fault == Some(node.op.kind()),
            };
            self.backprop_node(node, &g, &mut acc);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, acc: &mut Accumulator<'_>) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dC * B^T, dB = A^T * dC
                acc.with(*a, |da| gemm(m, n, k, gd, false, bv.data(), true, 1.0, da));
                acc.with(*b, |db| gemm(k, m, n, av.data(), true, gd, false, 1.0, db));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc.with(*a, |da| da.iter_mut().zip(gd).for_each(|(d, &x)| *d += x));
                acc.with(*b, |db| {
                    let n = db.len();
                    for (i, &x) in gd.iter().enumerate() {
                        db[i % n] += sign * x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                acc.with(*a, |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += gd[i] * bv[i % nb];
                    }
                });
                acc.with(*b, |db| {
                    for (i, &x) in gd.iter().enumerate() {
                        db[i % nb] += x * av[i];
                    }
                });
            }
            Op::Scale(a, f) => acc.with(*a, |da| {
                da.iter_mut().zip(gd).for_each(|(d, &x)| *d += f * x)
            }),
            Op::AddScalar(a) => {
                acc.with(*a, |da| da.iter_mut().zip(gd).for_each(|(d, &x)| *d += x))
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc.with(p, |dp| {
                        for (r, row) in dp.chunks_mut(w).enumerate() {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            row.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let total = self.value(*a).cols();
                let w = g.cols();
                acc.with(*a, |da| {
                    for (r, src) in gd.chunks(w).enumerate() {
                        let dst = &mut da[r * total + start..r * total + start + w];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Tanh(a) => acc.with(*a, |da| {
                for ((d, &x), &y) in da.iter_mut().zip(gd).zip(out) {
                    *d += x * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc.with(*a, |da| {
                for ((d, &x), &y) in da.iter_mut().zip(gd).zip(out) {
                    *d += x * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc.with(*a, |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(gd).zip(av) {
                        if v > 0.0 {
                            *d += x;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                acc.with(*a, |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(gd).zip(av) {
                        *d += if v > 0.0 { x } else { slope * x };
                    }
                });
            }
            Op::Exp(a) => acc.with(*a, |da| {
                for ((d, &x), &y) in da.iter_mut().zip(gd).zip(out) {
                    *d += x * y;
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                acc.with(*a, |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(gd).zip(av) {
                        *d += x / v;
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let av = self.value(*a).data();
                acc.with(*a, |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(gd).zip(av) {
                        *d += x * sigmoid(-v);
                    }
                });
            }
            Op::Sum(a) => acc.with(*a, |da| da.iter_mut().for_each(|d| *d += gd[0])),
            Op::Mean(a) => acc.with(*a, |da| {
                let s = gd[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += s);
            }),
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                acc.with(*logits, |dl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = gd[0] * w;
                        let row = &mut dl[r * classes..(r + 1) * classes];
                        for (d, &p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d += s * p;
                        }
                        row[t] -= s;
                    }
                });
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc.with(*a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += 2.0 * gd[0] * (x - y);
                    }
                });
                acc.with(*b, |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= 2.0 * gd[0] * (x - y);
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let d = self.value(*table).cols();
                acc.with(*table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut dt[i * d..(i + 1) * d];
                        dst.iter_mut()
                            .zip(&gd[r * d..(r + 1) * d])
                            .for_each(|(t, &x)| *t += x);
                    }
                });
            }
            Op::MaskRows { keep, new, old } => {
                let w = g.cols();
                for (target, want) in [(*new, true), (*old, false)] {
                    acc.with(target, |dt| {
                        for (r, &k) in keep.iter().enumerate() {
                            if k == want {
                                let dst = &mut dt[r * w..(r + 1) * w];
                                dst.iter_mut()
                                    .zip(&gd[r * w..(r + 1) * w])
                                    .for_each(|(t, &x)| *t += x);
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let f = inv_std.len();
                let b = gd.len() / f;
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xhat = vec![0.0; f];
                for r in 0..b {
                    for c in 0..f {
                        sum_dy[c] += gd[r * f + c];
                        sum_dy_xhat[c] += gd[r * f + c] * xhat[r * f + c];
                    }
                }
                acc.with(*gamma, |dg| {
                    dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &s)| *d += s)
                });
                acc.with(*beta, |db| {
                    db.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s)
                });
                let bf = b as f64;
                acc.with(*x, |dx| {
                    for r in 0..b {
                        for c in 0..f {
                            let i = r * f + c;
                            // dxhat = dy * gamma; both batch sums carry the same factor
                            dx[i] += gv[c] * inv_std[c] / bf
                                * (bf * gd[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                        }
                    }
                });
            }
        }
    }
}

struct Accumulator<'a> {
    grads: &'a mut [Option<Tensor>],
    shapes: &'a [Vec<usize>],
    nodes: &'a [Node],
    fault: bool,
}

impl Accumulator<'_> {
    /// Adds into the gradient buffer of `id`, allocating zeros on first use.
    /// Nodes that do not require a gradient are skipped.
    fn with(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = self.grads[id.0].get_or_insert_with(|| Tensor::zeros(&self.shapes[id.0]));
        if self.fault {
            let before = slot.data().to_vec();
            f(slot.data_mut());
            for (d, b) in slot.data_mut().iter_mut().zip(before) {
                *d = b + 1.1 * (*d - b);
            }
        } else {
            f(slot.data_mut());
        }
    }
}
