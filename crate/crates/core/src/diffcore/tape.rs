use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops::{eval, vjp, Op};
use super::tensor::{NodeId, Tensor};
use super::{DiffError, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE.fetch_add(1, Ordering::Relaxed)
}

struct Node {
    /// `None` marks a leaf.
    op: Option<Op>,
    inputs: Vec<Tensor>,
    parents: Vec<Option<usize>>,
    output: Tensor,
    extra: Option<Arc<[f64]>>,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Results are recorded only when at least one input is linked to this tape,
/// so evaluating on plain tensors through a tape costs nothing extra.
/// [`Tape::clear`] starts a new generation; tensors linked to an earlier
/// generation are rejected.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: fresh_id(), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node and invalidate all tensors linked so far.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
    }

    /// Register `value` as a differentiable leaf.
    pub fn leaf(&mut self, value: &Tensor) -> Tensor {
        let output = value.detach();
        let index = self.nodes.len();
        self.nodes.push(Node { op: None, inputs: Vec::new(), parents: Vec::new(), output: output.clone(), extra: None });
        output.with_node(NodeId { tape: self.id, index })
    }

    fn owns(&self, node: NodeId) -> bool {
        node.tape == self.id && node.index < self.nodes.len()
    }

    /// Evaluate `op` and record it when any input is linked to this tape.
    pub fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut parents = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.node() {
                Some(n) if self.owns(n) => parents.push(Some(n.index)),
                Some(_) => {
                    return Err(DiffError::Contract(format!(
                        "{}: input is linked to a different or cleared tape",
                        op.name()
                    )))
                }
                None => parents.push(None),
            }
        }
        let evaluated = eval(&op, inputs)?;
        if parents.iter().all(Option::is_none) {
            return Ok(evaluated.value);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|t| t.detach()).collect(),
            parents,
            output: evaluated.value.clone(),
            extra: evaluated.extra,
        });
        Ok(evaluated.value.with_node(NodeId { tape: self.id, index }))
    }

    /// Gradients of a scalar `loss` with respect to every leaf on the tape.
    ///
    /// Leaves that do not influence the loss receive zeros. The tape is not
    /// modified, so repeated calls give identical results.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(DiffError::Contract(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        let root = match loss.node() {
            Some(n) if self.owns(n) => n.index,
            _ => return Err(DiffError::Contract("loss is not recorded on this tape".into())),
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for index in (0..=root).rev() {
            let Some(g) = grads[index].take() else { continue };
            let node = &self.nodes[index];
            let Some(op) = &node.op else {
                grads[index] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = vjp(op, &node.inputs, &node.output, node.extra.as_deref(), &g, &needs);
            for (parent, ig) in node.parents.iter().zip(input_grads) {
                if let (Some(p), Some(ig)) = (parent, ig) {
                    match &mut grads[*p] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        let mut map = HashMap::new();
        for (index, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() {
                continue;
            }
            let shape = node.output.shape().to_vec();
            let data = grads.get_mut(index).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.output.numel()]);
            map.insert(index, Tensor::from_parts(shape, data));
        }
        Ok(Gradients { tape: self.id, grads: map })
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Log, &[a])
    }
    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sum, &[a])
    }
    pub fn sum_last(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::SumLast, &[a])
    }
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mean, &[a])
    }
    /// Columns `start..end` of the last axis.
    pub fn cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let axis = a.rank().checked_sub(1).ok_or_else(|| DiffError::Contract("slice of a scalar".into()))?;
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Op::ScalarMul(c), &[a])
    }
    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Op::AddScalar(c), &[a])
    }
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn gather(&mut self, a: &Tensor, indices: Arc<[usize]>) -> Result<Tensor> {
        self.apply(Op::Gather(indices), &[a])
    }
    pub fn solve_triangular(&mut self, a: &Tensor, b: &Tensor, lower: bool, unit_diagonal: bool) -> Result<Tensor> {
        self.apply(Op::SolveTriangular { lower, unit_diagonal }, &[a, b])
    }
    pub fn solve(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Solve, &[a, b])
    }
    pub fn logdet(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::LogDet, &[a])
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf tensor returned by [`Tape::leaf`].
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        let node = leaf.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(&node.index)
    }

    /// Gradients keyed by node.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        let tape = self.tape;
        self.grads.iter().map(move |(&index, t)| (NodeId { tape, index }, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
