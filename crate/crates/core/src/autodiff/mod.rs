//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into every node that requires one. The tape is
//! rebuilt for every forward pass.

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckReport};
pub use ops::{concat_cols, concat_rows};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backward rule for an operation implemented outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, in input order.
    fn backward(&self, grad_out: &Tensor, inputs: &[Rc<Tensor>], output: &Tensor)
        -> Vec<Option<Tensor>>;
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    MulCol { a: usize, col: usize },
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Silu(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Concat { parts: Vec<usize>, cols: bool },
    Slice { a: usize, cols: bool, start: usize },
    Transpose(usize),
    Reshape(usize),
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterRows { a: usize, idx: Vec<usize> },
    LayerNorm { a: usize, gain: usize, bias: usize, xhat: Tensor, inv_std: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf value; gradients are retained for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Rc::new(value), requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub(crate) fn push_node(&self, value: Rc<Tensor>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Record an externally implemented operation.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'t>> {
        for v in inputs {
            self.check(v)?;
        }
        let requires = inputs.iter().any(|v| self.requires(v.id));
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push_node(Rc::new(output), requires, Op::Custom { inputs: ids, op }))
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Populate gradients of `loss` with respect to every node that
    /// requires one. Accumulation is additive across multiple uses.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check(&loss)?;
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, pg) in ops::backward_op(&nodes_view(&nodes), node_op(node), &node.value, &g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior grads are not retained.
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }
}

fn node_op(node: &Node) -> &Op {
    &node.op
}

/// Read-only access to node values for backward rules.
pub(crate) struct NodesView<'a> {
    nodes: &'a [Node],
}

impl NodesView<'_> {
    pub(crate) fn value(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    pub(crate) fn rc(&self, id: usize) -> Rc<Tensor> {
        self.nodes[id].value.clone()
    }

    pub(crate) fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }
}

fn nodes_view(nodes: &[Node]) -> NodesView<'_> {
    NodesView { nodes }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}

#[cfg(test)]
mod tests;
