//! Dense f64 tensors with a reverse-mode gradient record.
//!
//! Every operation that touches a tensor with `requires_grad` set records its
//! inputs on the output node; [`Tensor::backward`] walks that graph in reverse
//! topological order. Tensors are immutable once built, so a graph can never
//! observe a later mutation of one of its inputs.

mod backward;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{contract, Error, Result};

pub use ops::gelu_scalar;

/// Marker inside a gather index: the output element is zero.
pub const GATHER_ZERO: usize = usize::MAX;

thread_local! {
    static MATMUL_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Running total of multiply-accumulates performed by [`Tensor::matmul`] on
/// this thread.
pub fn matmul_macs() -> u64 {
    MATMUL_MACS.with(Cell::get)
}

/// Runs `f` and returns its result together with the multiply-accumulates the
/// matrix products inside it performed.
pub fn count_matmul_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = matmul_macs();
    let out = f();
    (out, matmul_macs() - before)
}

pub(crate) fn record_macs(n: u64) {
    MATMUL_MACS.with(|c| c.set(c.get() + n));
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

pub(crate) struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

pub(crate) enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    /// rhs shape is a trailing suffix of lhs shape.
    AddBroadcast(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Square(Tensor),
    Sqrt(Tensor),
    Tanh(Tensor),
    Gelu(Tensor),
    Softmax(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        src: Tensor,
        index: Rc<[usize]>,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Sum(Tensor),
    Reshape(Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBroadcast(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Gather { src, .. } => vec![src],
            Op::Concat { parts, .. } => parts.iter().collect(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBroadcast(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
        }
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(contract(format!(
            "shape {shape:?} must have positive extents"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(contract(format!(
            "shape {shape:?} holds {n} elements but {len} values were given"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        validate_shape(shape, data.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Leaf tensor whose gradient is recorded by [`Tensor::backward`].
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        validate_shape(shape, data.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], false, Op::Leaf)
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Output of an operation: tracked iff any input is tracked, and the
    /// graph edge is dropped entirely otherwise.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor::from_parts(shape, data, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, detached from any gradient record.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.0.shape.clone(), self.0.data.clone(), false, Op::Leaf)
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    pub(crate) fn node_ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    pub(crate) fn node(&self) -> &Node {
        &self.0
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.name())
            .finish()
    }
}

impl Node {
    pub(crate) fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn op(&self) -> &Op {
        &self.op
    }
}
