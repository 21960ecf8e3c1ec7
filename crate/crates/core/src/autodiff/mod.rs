//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The tape is a Wengert list rebuilt on every forward pass: each operation
//! records its inputs, forward values, and whatever context its backward rule
//! needs. `backward` walks the list in reverse, so inputs are always visited
//! after every operation that consumed them, and each node exactly once.
//!
//! A tape and its node ids are confined to a single thread; concurrent work
//! uses one tape per model instance.

mod linalg;
mod nn;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, numel, BroadcastIter, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Forward/eval switch for operations whose semantics differ between
/// training and inference (batch normalization).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Neg,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    AddScalar,
    MulScalar(f64),
    Sum,
    Mean,
    // linear algebra
    Matmul,
    Transpose,
    DiagEmbed,
    DiagPart,
    LowerTriExpDiag,
    CholeskyFactor,
    TriSolveLower,
    // structural
    Reshape,
    SelectRow(usize),
    StackRows,
    Slice1d { start: usize },
    ConcatChannels,
    BroadcastSpatial,
    GlobalAvgPool,
    // neural-network kernels
    Conv2d { ksize: usize, pad: usize },
    AvgPool2,
    UpsampleBilinear2,
    BatchNorm(nn::BatchNormCtx),
    Dropout { scale: f64, mask: Vec<bool> },
    SoftmaxCrossEntropy { target: Vec<f64> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

/// Recorded computation graph. Operations append nodes; [`Tape::backward`]
/// fills gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    debug_checks: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            debug_checks: false,
        }
    }

    /// Enables per-operation finiteness checks; catches log/div misuse at the
    /// offending node instead of propagating NaNs.
    pub fn with_debug_checks() -> Self {
        Tape {
            nodes: Vec::new(),
            debug_checks: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<NodeId> {
        debug_assert_eq!(numel(&shape), values.len());
        if self.debug_checks {
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite value {bad} produced by {op:?}"
                )));
            }
        }
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|id| self.nodes[id.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            values,
            grad: None,
            requires_grad,
        });
        Ok(id)
    }

    // ----- leaves -----

    /// Records a differentiable leaf (a parameter).
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: tensor.shape().to_vec(),
            values: tensor.values().to_vec(),
            grad: None,
            requires_grad: true,
        });
        id
    }

    /// Records a non-differentiable leaf (inputs, noise, detached values).
    pub fn constant(&mut self, tensor: &Tensor) -> NodeId {
        self.constant_values(tensor.shape().to_vec(), tensor.values().to_vec())
    }

    pub fn constant_values(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape,
            values,
            grad: None,
            requires_grad: false,
        });
        id
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant_values(vec![1], vec![value])
    }

    // ----- accessors -----

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("node shape and values agree")
    }

    /// Gradient of the most recent `backward` root with respect to `id`.
    /// Nodes the root does not depend on report exact zeros.
    pub fn grad(&self, id: NodeId) -> Vec<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].values.len()],
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ----- pointwise -----

    pub fn elementwise(&mut self, op: ElementwiseOp, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Div, Some(b)) => self.div(a, b),
            (ElementwiseOp::Exp, None) => self.exp(a),
            (ElementwiseOp::Log, None) => self.log(a),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (ElementwiseOp::Sigmoid, None) => self.sigmoid(a),
            (ElementwiseOp::Neg, None) => self.neg(a),
            (op, Some(_)) => Err(Error::shape(format!("{op:?} is unary, second operand given"))),
            (op, None) => Err(Error::shape(format!("{op:?} is binary, second operand missing"))),
        }
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shapes(ash, bsh).map_err(|_| {
            Error::shape(format!("{op:?}: operands {ash:?} and {bsh:?} do not broadcast"))
        })?;
        let n = numel(&out_shape);
        let mut values = vec![0.0; n];
        if *ash == out_shape && *bsh == out_shape {
            let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
            for i in 0..n {
                values[i] = f(av[i], bv[i]);
            }
        } else {
            let ai = BroadcastIter::new(ash, &out_shape);
            let bi = BroadcastIter::new(bsh, &out_shape);
            let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
            for (k, (ia, ib)) in ai.zip(bi).enumerate() {
                values[k] = f(av[ia], bv[ib]);
            }
        }
        self.push(op, vec![a, b], out_shape, values)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(op, vec![a], shape, values)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::AddScalar, a, |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::MulScalar(c), a, |x| x * c)
    }

    // ----- reductions -----

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        self.push(Op::Sum, vec![a], vec![1], vec![total])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].values.len();
        let total: f64 = self.nodes[a.0].values.iter().sum();
        self.push(Op::Mean, vec![a], vec![1], vec![total / n as f64])
    }

    // ----- structural -----

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.nodes[a.0].values.len() {
            return Err(Error::shape(format!(
                "reshape to {shape:?} changes element count from {}",
                self.nodes[a.0].values.len()
            )));
        }
        let values = self.nodes[a.0].values.clone();
        self.push(Op::Reshape, vec![a], shape, values)
    }

    /// Extracts row `row` of a `[rows, cols]` tensor as a `[cols]` vector.
    pub fn select_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 {
            return Err(Error::shape(format!("select_row expects 2-d input, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if row >= rows {
            return Err(Error::shape(format!("row {row} out of range for {rows} rows")));
        }
        let values = self.nodes[a.0].values[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::SelectRow(row), vec![a], vec![cols], values)
    }

    /// Stacks equal-length vectors into a `[k, n]` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows needs at least one row".to_string()));
        }
        let n = self.nodes[rows[0].0].values.len();
        let mut values = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let node = &self.nodes[r.0];
            if node.shape.len() != 1 || node.values.len() != n {
                return Err(Error::shape(format!(
                    "stack_rows expects [{n}] vectors, got {:?}",
                    node.shape
                )));
            }
            values.extend_from_slice(&node.values);
        }
        self.push(Op::StackRows, rows.to_vec(), vec![rows.len(), n], values)
    }

    /// Contiguous slice of a 1-d tensor.
    pub fn slice_1d(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 1 {
            return Err(Error::shape(format!("slice_1d expects 1-d input, got {shape:?}")));
        }
        if start + len > shape[0] {
            return Err(Error::shape(format!(
                "slice {start}..{} out of range for length {}",
                start + len,
                shape[0]
            )));
        }
        let values = self.nodes[a.0].values[start..start + len].to_vec();
        self.push(Op::Slice1d { start }, vec![a], vec![len], values)
    }

    // ----- backward -----

    /// Reverse pass seeding the root gradient with ones. Visits each node at
    /// most once, in reverse recording order.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_len = self.nodes[root.0].values.len();
        self.nodes[root.0].grad = Some(vec![1.0; root_len]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            if node.grad.is_none() {
                continue;
            }
            backward_step(node, before)?;
        }
        Ok(())
    }
}

/// Accumulates `delta` into the gradient buffer of `id`, allocating on first use.
fn accumulate(nodes: &mut [Node], id: NodeId, delta: &[f64]) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let grad = node
        .grad
        .get_or_insert_with(|| vec![0.0; node.values.len()]);
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

fn backward_step(node: &Node, before: &mut [Node]) -> Result<()> {
    let go = node.grad.as_ref().expect("checked by caller");
    match &node.op {
        Op::Leaf => {}
        Op::Add | Op::Sub | Op::Mul | Op::Div => binary_backward(node, before, go),
        Op::Neg => {
            let ga: Vec<f64> = go.iter().map(|g| -g).collect();
            accumulate(before, node.inputs[0], &ga);
        }
        Op::Exp => {
            let ga: Vec<f64> = go.iter().zip(&node.values).map(|(g, y)| g * y).collect();
            accumulate(before, node.inputs[0], &ga);
        }
        Op::Log => {
            let x = &before[node.inputs[0].0].values;
            let ga: Vec<f64> = go.iter().zip(x).map(|(g, x)| g / x).collect();
            accumulate(before, node.inputs[0], &ga);
        }
        Op::Relu => {
            let x = &before[node.inputs[0].0].values;
            let ga: Vec<f64> = go
                .iter()
                .zip(x)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(before, node.inputs[0], &ga);
        }
        Op::Sigmoid => {
            let ga: Vec<f64> = go
                .iter()
                .zip(&node.values)
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            accumulate(before, node.inputs[0], &ga);
        }
        Op::AddScalar => {
            accumulate(before, node.inputs[0], go);
        }
        Op::MulScalar(c) => {
            let ga: Vec<f64> = go.iter().map(|g| g * c).collect();
            accumulate(before, node.inputs[0], &ga);
        }
        Op::Sum => {
            let n = before[node.inputs[0].0].values.len();
            accumulate(before, node.inputs[0], &vec![go[0]; n]);
        }
        Op::Mean => {
            let n = before[node.inputs[0].0].values.len();
            accumulate(before, node.inputs[0], &vec![go[0] / n as f64; n]);
        }
        Op::Reshape => {
            accumulate(before, node.inputs[0], go);
        }
        Op::SelectRow(row) => {
            let cols = node.values.len();
            let mut ga = vec![0.0; before[node.inputs[0].0].values.len()];
            ga[row * cols..(row + 1) * cols].copy_from_slice(go);
            accumulate(before, node.inputs[0], &ga);
        }
        Op::StackRows => {
            let n = node.shape[1];
            for (k, &input) in node.inputs.iter().enumerate() {
                accumulate(before, input, &go[k * n..(k + 1) * n]);
            }
        }
        Op::Slice1d { start } => {
            let mut ga = vec![0.0; before[node.inputs[0].0].values.len()];
            ga[*start..*start + node.values.len()].copy_from_slice(go);
            accumulate(before, node.inputs[0], &ga);
        }
        Op::Matmul
        | Op::Transpose
        | Op::DiagEmbed
        | Op::DiagPart
        | Op::LowerTriExpDiag
        | Op::CholeskyFactor
        | Op::TriSolveLower => linalg::backward(node, before, go),
        Op::Conv2d { .. }
        | Op::AvgPool2
        | Op::UpsampleBilinear2
        | Op::BatchNorm(_)
        | Op::Dropout { .. }
        | Op::SoftmaxCrossEntropy { .. }
        | Op::GlobalAvgPool
        | Op::BroadcastSpatial
        | Op::ConcatChannels => nn::backward(node, before, go),
    }
    Ok(())
}

fn binary_backward(node: &Node, before: &mut [Node], go: &[f64]) {
    let a = node.inputs[0];
    let b = node.inputs[1];
    let a_shape = before[a.0].shape.clone();
    let b_shape = before[b.0].shape.clone();
    let mut ga = vec![0.0; before[a.0].values.len()];
    let mut gb = vec![0.0; before[b.0].values.len()];
    {
        let av = &before[a.0].values;
        let bv = &before[b.0].values;
        let same = a_shape == node.shape && b_shape == node.shape;
        let apply = |ia: usize, ib: usize, k: usize, ga: &mut [f64], gb: &mut [f64]| {
            let g = go[k];
            match node.op {
                Op::Add => {
                    ga[ia] += g;
                    gb[ib] += g;
                }
                Op::Sub => {
                    ga[ia] += g;
                    gb[ib] -= g;
                }
                Op::Mul => {
                    ga[ia] += g * bv[ib];
                    gb[ib] += g * av[ia];
                }
                Op::Div => {
                    ga[ia] += g / bv[ib];
                    gb[ib] -= g * av[ia] / (bv[ib] * bv[ib]);
                }
                _ => unreachable!("binary_backward only handles arithmetic ops"),
            }
        };
        if same {
            for k in 0..go.len() {
                apply(k, k, k, &mut ga, &mut gb);
            }
        } else {
            let ai = BroadcastIter::new(&a_shape, &node.shape);
            let bi = BroadcastIter::new(&b_shape, &node.shape);
            for (k, (ia, ib)) in ai.zip(bi).enumerate() {
                apply(ia, ib, k, &mut ga, &mut gb);
            }
        }
    }
    accumulate(before, a, &ga);
    accumulate(before, b, &gb);
}
