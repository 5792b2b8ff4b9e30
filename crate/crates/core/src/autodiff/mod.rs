//! Tape-based reverse-mode differentiation over row-major f64 matrices.
//!
//! Every value is a 2-D tensor `[rows, cols]`; scalars are `[1, 1]`.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is one reverse sweep.

mod check;
mod checkpoint;
mod ops;
mod params;

use std::cell::Cell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use check::{grad_check, negative_control, operator_checks, param_grad_check, GradCheckReport};
pub use checkpoint::{load_tensors, manifest_path, save_tensors, CheckpointError, CheckpointManifest, TensorEntry};
pub use ops::{AttentionShape, Reduction, IGNORE_INDEX};
pub use params::{Adam, AdamConfig, ParamStore};

use ops::Op;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "data length does not match shape {shape:?}");
        Tensor { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::matrix(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

thread_local! {
    static CORRUPT_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with a deliberately wrong matmul backward rule, for checking
/// that gradient checks catch faulty derivatives.
pub fn with_corrupted_backward<R>(f: impl FnOnce() -> R) -> R {
    CORRUPT_BACKWARD.with(|c| c.set(true));
    let out = f();
    CORRUPT_BACKWARD.with(|c| c.set(false));
    out
}

pub(crate) fn backward_corrupted() -> bool {
    CORRUPT_BACKWARD.with(|c| c.get())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data.iter().all(|x| !x.is_nan()), "NaN produced by {:?}", op.name());
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The named parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let t = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        let v = self.push(t, Op::Leaf, store.is_trainable(name));
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter touched by the graph.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(n, v)| (n.clone(), self.grad(*v).map_or_else(|| vec![0.0; self.value(*v).len()], |g| g.to_vec())))
            .collect()
    }

    /// Seeds `d loss = 1` and propagates to every node that requires a
    /// gradient, visiting each node once in reverse order.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                ops::backward(self, i, &g);
            }
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}
