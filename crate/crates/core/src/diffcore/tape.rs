//! Reverse-mode differentiation over an explicit, single-use tape.
//!
//! Every operation appends a record to the [`Tape`] and returns a [`Var`]
//! handle. Gradients are obtained either numerically ([`Tape::backward`],
//! [`Tape::grad`], both of which consume the tape) or symbolically with
//! [`Tape::grad_graph`], which records the backward pass onto the same tape so
//! the resulting gradients can themselves be differentiated. That second path
//! is what makes exact second-order meta-gradients possible.
//!
//! Vector-Jacobian products are written in terms of the tape's own
//! operations, so the numeric and the symbolic backward share one
//! implementation.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Kind of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    AddScalar,
    Recip,
    Tanh,
    LeakyRelu,
    Exp,
    Log,
    Sigmoid,
    MatMul,
    Transpose,
    Reshape,
    Sum,
    SqNorm,
    SumRows,
    SumCols,
    ExpandRows,
    ExpandCols,
    ExpandScalar,
    LogSoftmax,
    SliceCols,
    PadCols,
    ConcatCols,
    Lerp,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Recip => "recip",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::SqNorm => "sq_norm",
            OpKind::SumRows => "sum_rows",
            OpKind::SumCols => "sum_cols",
            OpKind::ExpandRows => "expand_rows",
            OpKind::ExpandCols => "expand_cols",
            OpKind::ExpandScalar => "expand_scalar",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::SliceCols => "slice_cols",
            OpKind::PadCols => "pad_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Lerp => "lerp",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Recip(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SqNorm(usize),
    SumRows(usize),
    SumCols(usize),
    ExpandRows(usize),
    ExpandCols(usize),
    ExpandScalar(usize),
    LogSoftmax(usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    ConcatCols(Vec<usize>),
    Lerp(usize, usize, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Neg(..) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Recip(..) => OpKind::Recip,
            Op::Tanh(..) => OpKind::Tanh,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::SqNorm(..) => OpKind::SqNorm,
            Op::SumRows(..) => OpKind::SumRows,
            Op::SumCols(..) => OpKind::SumCols,
            Op::ExpandRows(..) => OpKind::ExpandRows,
            Op::ExpandCols(..) => OpKind::ExpandCols,
            Op::ExpandScalar(..) => OpKind::ExpandScalar,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::PadCols(..) => OpKind::PadCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Lerp(..) => OpKind::Lerp,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Recip(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::SqNorm(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::ExpandRows(a)
            | Op::ExpandCols(a)
            | Op::ExpandScalar(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, _)
            | Op::PadCols(a, _) => vec![*a],
            Op::ConcatCols(v) => v.clone(),
            Op::Lerp(a, b, w) => vec![*a, *b, *w],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One entry of the tape as seen from outside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: usize,
    pub kind: OpKind,
    pub inputs: Vec<usize>,
}

/// Recorded computation graph. Single-threaded and single-use: after a
/// numeric backward pass the tape refuses further backward calls.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` if the leaf does not influence the output.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Snapshot of the recorded operations in recording order.
    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(id, n)| Record {
                id,
                kind: n.op.kind(),
                inputs: n.op.inputs(),
            })
            .collect()
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.kind().name() });
        }
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::contract("variable belongs to a different tape"))
        }
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'_>> {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    fn same_shape(&self, kind: OpKind, a: usize, b: usize) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                kind.name(),
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        Ok(())
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'_>> {
        self.same_shape(op.kind(), a, b)?;
        let out = self.value(a).zip_map(&self.value(b), f)?;
        self.push(out, op)
    }

    fn matrix(&self, kind: OpKind, a: usize) -> Result<(usize, usize)> {
        let v = self.value(a);
        if !v.is_matrix() {
            return Err(Error::shape(
                kind.name(),
                format!("expected a matrix, got {:?}", v.shape()),
            ));
        }
        Ok((v.rows(), v.cols()))
    }

    // ---- backward ---------------------------------------------------------

    fn check_scalar_output(&self, output: &Var<'_>) -> Result<()> {
        self.check_owner(output)?;
        let n = self.value(output.id).numel();
        if n != 1 {
            return Err(Error::contract(format!(
                "backward needs a single-element output, got {n} elements"
            )));
        }
        Ok(())
    }

    /// Propagates `d output / d node` for every node up to `output`.
    /// Returns gradient node ids indexed by forward node id.
    fn propagate(&self, output: usize, create_graph: bool) -> Result<Vec<Option<usize>>> {
        let n = output + 1;
        let mut grads: Vec<Option<usize>> = vec![None; n];
        let seed_shape = self.value(output).shape().to_vec();
        let prev = self.recording.replace(create_graph);
        let result = (|| {
            grads[output] = Some(self.constant(Tensor::ones(&seed_shape)).id);
            for id in (0..n).rev() {
                let Some(g) = grads[id] else { continue };
                let (op, needs) = {
                    let nodes = self.nodes.borrow();
                    (nodes[id].op.clone(), nodes[id].requires_grad)
                };
                if !needs {
                    continue;
                }
                for (input, contrib) in self.vjp(id, &op, g)? {
                    if !self.nodes.borrow()[input].requires_grad {
                        continue;
                    }
                    grads[input] = Some(match grads[input] {
                        None => contrib,
                        Some(prev) => self.var(prev).add(self.var(contrib))?.id,
                    });
                }
            }
            Ok(grads)
        })();
        self.recording.set(prev);
        result
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn take_consumption(&self) -> Result<()> {
        if self.consumed.replace(true) {
            return Err(Error::contract(
                "tape already consumed by a backward pass; record a new tape",
            ));
        }
        Ok(())
    }

    /// Numeric backward pass. Fills gradients for every leaf that reaches
    /// `output` and consumes the tape.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check_scalar_output(&output)?;
        self.take_consumption()?;
        let grads = self.propagate(output.id, false)?;
        let nodes = self.nodes.borrow();
        let mut out = vec![None; nodes.len()];
        for (id, g) in grads.iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[id].op) {
                let t = nodes[*g].value.clone();
                if !t.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out[id] = Some(t);
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Numeric gradients of `output` with respect to `wrt`, consuming the tape.
    /// Inputs that do not influence `output` get an all-zero gradient.
    pub fn grad(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        self.check_scalar_output(&output)?;
        for w in wrt {
            self.check_owner(w)?;
        }
        self.take_consumption()?;
        let grads = self.propagate(output.id, false)?;
        let nodes = self.nodes.borrow();
        wrt.iter()
            .map(|w| {
                let t = match grads.get(w.id).copied().flatten() {
                    Some(g) => nodes[g].value.clone(),
                    None => Tensor::zeros(nodes[w.id].value.shape()),
                };
                if t.all_finite() {
                    Ok(t)
                } else {
                    Err(Error::NonFinite { op: "backward" })
                }
            })
            .collect()
    }

    /// Symbolic gradients: the backward pass is itself recorded, so the
    /// returned variables can be differentiated again. Does not consume the tape.
    pub fn grad_graph<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check_scalar_output(&output)?;
        if self.consumed.get() {
            return Err(Error::contract("tape already consumed by a backward pass"));
        }
        for w in wrt {
            self.check_owner(w)?;
        }
        let grads = self.propagate(output.id, true)?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => self.var(g),
                None => {
                    let shape = self.value(w.id).shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    /// Vector-Jacobian product of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, op: &Op, g: usize) -> Result<Vec<(usize, usize)>> {
        let g = self.var(g);
        let out = self.var(id);
        let v = |i: usize| self.var(i);
        let res = match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(a, g.id), (b, g.id)],
            Op::Sub(a, b) => vec![(a, g.id), (b, g.neg()?.id)],
            Op::Mul(a, b) => vec![(a, g.mul(v(b))?.id), (b, g.mul(v(a))?.id)],
            Op::Neg(a) => vec![(a, g.neg()?.id)],
            Op::Scale(a, c) => vec![(a, g.scale(c)?.id)],
            Op::AddScalar(a) => vec![(a, g.id)],
            Op::Recip(a) => {
                // d(1/a) = -1/a^2 = -out^2
                vec![(a, g.mul(out.mul(out)?)?.neg()?.id)]
            }
            Op::Tanh(a) => {
                let d = out.mul(out)?.neg()?.add_scalar(1.0)?;
                vec![(a, g.mul(d)?.id)]
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                vec![(a, g.mul(self.constant(mask))?.id)]
            }
            Op::Exp(a) => vec![(a, g.mul(out)?.id)],
            Op::Log(a) => vec![(a, g.mul(v(a).recip()?)?.id)],
            Op::Sigmoid(a) => {
                let d = out.mul(out.neg()?.add_scalar(1.0)?)?;
                vec![(a, g.mul(d)?.id)]
            }
            Op::MatMul(a, b) => {
                let ga = g.matmul(v(b).transpose()?)?;
                let gb = v(a).transpose()?.matmul(g)?;
                vec![(a, ga.id), (b, gb.id)]
            }
            Op::Transpose(a) => vec![(a, g.transpose()?.id)],
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                vec![(a, g.reshape(&shape)?.id)]
            }
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                vec![(a, g.expand_scalar(&shape)?.id)]
            }
            Op::SqNorm(a) => {
                let shape = self.value(a).shape().to_vec();
                let ge = g.expand_scalar(&shape)?;
                vec![(a, v(a).mul(ge)?.scale(2.0)?.id)]
            }
            Op::SumRows(a) => {
                let rows = self.value(a).rows();
                vec![(a, g.expand_rows(rows)?.id)]
            }
            Op::SumCols(a) => {
                let cols = self.value(a).cols();
                vec![(a, g.expand_cols(cols)?.id)]
            }
            Op::ExpandRows(a) => vec![(a, g.sum_rows()?.id)],
            Op::ExpandCols(a) => vec![(a, g.sum_cols()?.id)],
            Op::ExpandScalar(a) => {
                let shape = self.value(a).shape().to_vec();
                vec![(a, g.sum()?.reshape(&shape)?.id)]
            }
            Op::LogSoftmax(a) => {
                let cols = self.value(a).cols();
                let soft = out.exp()?;
                let gsum = g.sum_cols()?.expand_cols(cols)?;
                vec![(a, g.sub(soft.mul(gsum)?)?.id)]
            }
            Op::SliceCols(a, start) => {
                let total = self.value(a).cols();
                vec![(a, g.pad_cols(start, total)?.id)]
            }
            Op::PadCols(a, start) => {
                let width = self.value(a).cols();
                vec![(a, g.slice_cols(start, start + width)?.id)]
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    res.push((p, g.slice_cols(start, start + w)?.id));
                    start += w;
                }
                res
            }
            Op::Lerp(a, b, w) => {
                let cols = self.value(a).cols();
                let we = v(w).expand_cols(cols)?;
                let gb = g.mul(we)?;
                let ga = g.sub(gb)?;
                let gw = g.mul(v(b).sub(v(a))?)?.sum_cols()?;
                vec![(a, ga.id), (b, gb.id), (w, gw.id)]
            }
        };
        Ok(res)
    }
}

// Fallible arithmetic, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn other(&self, o: Var<'t>) -> Result<usize> {
        self.tape.check_owner(&o)?;
        Ok(o.id)
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        let b = self.other(o)?;
        self.tape.binary(self.id, b, Op::Add(self.id, b), |x, y| x + y)
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        let b = self.other(o)?;
        self.tape.binary(self.id, b, Op::Sub(self.id, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        let b = self.other(o)?;
        self.tape.binary(self.id, b, Op::Mul(self.id, b), |x, y| x * y)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |x| x + c)
    }

    pub fn recip(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Recip(self.id), |x| 1.0 / x)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::LeakyRelu(self.id, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Log(self.id), f64::ln)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        let b = self.other(o)?;
        let out = self.tape.value(self.id).matmul(&self.tape.value(b))?;
        self.tape.push(out, Op::MatMul(self.id, b))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.tape.value(self.id).transpose()?;
        self.tape.push(out, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self
            .tape
            .value(self.id)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", self.shape(), shape)))?;
        self.tape.push(out, Op::Reshape(self.id))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum of squares of all elements, as a scalar.
    pub fn sq_norm(self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).sq_norm();
        self.tape.push(Tensor::scalar(s), Op::SqNorm(self.id))
    }

    /// Column sums of a `(r, c)` matrix, shape `(1, c)`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let (r, c) = self.tape.matrix(OpKind::SumRows, self.id)?;
        let out = {
            let v = self.tape.value(self.id);
            let mut s = vec![0.0; c];
            for i in 0..r {
                for (acc, x) in s.iter_mut().zip(v.row(i)) {
                    *acc += x;
                }
            }
            Tensor::new(vec![1, c], s)?
        };
        self.tape.push(out, Op::SumRows(self.id))
    }

    /// Row sums of a `(r, c)` matrix, shape `(r, 1)`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let (r, _) = self.tape.matrix(OpKind::SumCols, self.id)?;
        let out = {
            let v = self.tape.value(self.id);
            Tensor::new(vec![r, 1], (0..r).map(|i| v.row(i).iter().sum()).collect())?
        };
        self.tape.push(out, Op::SumCols(self.id))
    }

    /// Repeats a `(1, c)` row `rows` times.
    pub fn expand_rows(self, rows: usize) -> Result<Var<'t>> {
        let (r, c) = self.tape.matrix(OpKind::ExpandRows, self.id)?;
        if r != 1 {
            return Err(Error::shape("expand_rows", format!("expected one row, got {r}")));
        }
        let out = {
            let v = self.tape.value(self.id);
            let mut d = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                d.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, c], d)?
        };
        self.tape.push(out, Op::ExpandRows(self.id))
    }

    /// Repeats an `(r, 1)` column `cols` times.
    pub fn expand_cols(self, cols: usize) -> Result<Var<'t>> {
        let (r, c) = self.tape.matrix(OpKind::ExpandCols, self.id)?;
        if c != 1 {
            return Err(Error::shape("expand_cols", format!("expected one column, got {c}")));
        }
        let out = {
            let v = self.tape.value(self.id);
            let mut d = Vec::with_capacity(r * cols);
            for &x in v.data() {
                d.extend(std::iter::repeat_n(x, cols));
            }
            Tensor::new(vec![r, cols], d)?
        };
        self.tape.push(out, Op::ExpandCols(self.id))
    }

    /// Broadcasts a single-element value to `shape`.
    pub fn expand_scalar(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let v = self.tape.value(self.id);
            if v.numel() != 1 {
                return Err(Error::shape(
                    "expand_scalar",
                    format!("{:?} is not a scalar", v.shape()),
                ));
            }
            Tensor::full(shape, v.data()[0])
        };
        self.tape.push(out, Op::ExpandScalar(self.id))
    }

    /// Adds a `(1, c)` bias row to every row of a `(r, c)` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let rows = self.tape.matrix(OpKind::ExpandRows, self.id)?.0;
        self.add(row.expand_rows(rows)?)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let (r, c) = self.tape.matrix(OpKind::LogSoftmax, self.id)?;
        let out = {
            let v = self.tape.value(self.id);
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = v.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                d.extend(row.iter().map(|x| x - lse));
            }
            Tensor::new(vec![r, c], d)?
        };
        self.tape.push(out, Op::LogSoftmax(self.id))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let (r, c) = self.tape.matrix(OpKind::SliceCols, self.id)?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let out = {
            let v = self.tape.value(self.id);
            let mut d = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                d.extend_from_slice(&v.row(i)[start..end]);
            }
            Tensor::new(vec![r, end - start], d)?
        };
        self.tape.push(out, Op::SliceCols(self.id, start))
    }

    /// Embeds the columns of a matrix at offset `start` in a zero matrix with `total` columns.
    pub fn pad_cols(self, start: usize, total: usize) -> Result<Var<'t>> {
        let (r, c) = self.tape.matrix(OpKind::PadCols, self.id)?;
        if start + c > total {
            return Err(Error::shape(
                "pad_cols",
                format!("{c} columns at {start} exceed {total}"),
            ));
        }
        let out = {
            let v = self.tape.value(self.id);
            let mut d = vec![0.0; r * total];
            for i in 0..r {
                d[i * total + start..i * total + start + c].copy_from_slice(v.row(i));
            }
            Tensor::new(vec![r, total], d)?
        };
        self.tape.push(out, Op::PadCols(self.id, start))
    }

    /// `(1 - w) * self + w * other` with one interpolation weight per row (`w` is `(r, 1)`).
    pub fn lerp(self, other: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
        let b = self.other(other)?;
        let wid = self.other(w)?;
        self.tape.same_shape(OpKind::Lerp, self.id, b)?;
        let (r, c) = self.tape.matrix(OpKind::Lerp, self.id)?;
        let out = {
            let (va, vb, vw) = (self.tape.value(self.id), self.tape.value(b), self.tape.value(wid));
            if vw.shape() != [r, 1] {
                return Err(Error::shape("lerp", format!("weights {:?} for {r} rows", vw.shape())));
            }
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let wi = vw.data()[i];
                for (x, y) in va.row(i).iter().zip(vb.row(i)) {
                    d.push(x + (y - x) * wi);
                }
            }
            Tensor::new(vec![r, c], d)?
        };
        self.tape.push(out, Op::Lerp(self.id, b, wid))
    }
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
    let tape = first.tape;
    let rows = tape.matrix(OpKind::ConcatCols, first.id)?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        tape.check_owner(p)?;
        let (r, c) = tape.matrix(OpKind::ConcatCols, p.id)?;
        if r != rows {
            return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let out = {
        let mut d = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = tape.value(p.id);
            for i in 0..rows {
                d[i * total + offset..i * total + offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        Tensor::new(vec![rows, total], d)?
    };
    tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
}
