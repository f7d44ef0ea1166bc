//! Dense 64-bit tensors with a reverse-mode differentiation tape.
//!
//! Every operation is a method on [`Tape`] that evaluates eagerly, appends a
//! node holding its output, and remembers enough to run its backward rule.
//! Nodes are stored in creation order, so the tape is always topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

mod gemm;
mod ops;
pub mod optim;

use thiserror::Error;

pub use ops::conv_out_len;
pub use optim::{adamw_step, cosine_warm_restart_lr, AdamWConfig, AdamWState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("sequence too short: length {len} with kernel {kernel}, padding {padding}")]
    SequenceTooShort {
        len: usize,
        kernel: usize,
        padding: usize,
    },
    #[error("index {index} out of range for extent {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("loss has no non-padded target positions")]
    EmptyTarget,
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Builds a row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor { shape: vec![rows.len(), cols], data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: ops::Op,
}

/// Append-only record of evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current length; pass to [`Tape::truncate`] to discard later nodes.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node created after `mark`. Vars pointing past it become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.push(t, ops::Op::Leaf)
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Records a copy of `t` as a gradient-tracked leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = t.clone();
        v.requires_grad = true;
        self.leaf(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: ops::Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: ops::Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = self.needs_grad(inputs);
        let value = Tensor { shape, data, requires_grad, grad: None };
        self.push(value, op)
    }

    /// Populates gradients of every gradient-tracked node that `loss` depends on.
    ///
    /// Gradients from previous calls are cleared first. Fan-out accumulates
    /// additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape.clone()));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &g);
            self.nodes[i].value.grad = Some(g);
            for (input, delta) in contributions {
                let slot = &mut self.nodes[input.0].value;
                if !slot.requires_grad {
                    continue;
                }
                match &mut slot.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    None => slot.grad = Some(delta),
                }
            }
        }
        Ok(())
    }
}
