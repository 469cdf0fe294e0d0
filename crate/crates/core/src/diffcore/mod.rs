//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every downstream module evaluates through a [`Tape`]. Values that are not
//! linked to the tape flow through without being recorded, so the same layer
//! code serves inference and training:
//!
//! ```
//! use trumpetflow::diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(&x, &x).unwrap();
//! let loss = tape.sum(&sq).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod ops;
mod tape;
mod tensor;

pub use ops::{Op, MAX_CONDITION};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeId, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: String, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: domain error ({detail})")]
    Domain { op: String, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },
    #[error("{op}: numerically singular system (condition estimate {condition:.3e})")]
    Singular { op: String, condition: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Evaluate `op` on plain values without recording anything.
pub fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let detached: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
    let refs: Vec<&Tensor> = detached.iter().collect();
    ops::eval(&op, &refs).map(|e| e.value)
}

/// Central-difference gradient of a scalar function.
///
/// Entry `i` is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(DiffError::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + step;
        let up = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i] - step;
        let down = f(&Tensor::new(x.shape().to_vec(), probe)?)?;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

fn vector_len(t: &Tensor) -> Option<usize> {
    let non_unit = t.shape().iter().filter(|&&d| d != 1).count();
    (t.rank() >= 1 && t.rank() <= 2 && non_unit <= 1).then(|| t.numel())
}

/// Jacobian `[m, n]` of a vector function, one reverse pass per output row.
///
/// `x` and the output must be vectors (`[n]` or `[1, n]`). The closure
/// receives a tape-linked copy of `x`.
pub fn jacobian<F>(mut f: F, x: &Tensor) -> Result<Tensor>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let n = vector_len(x).ok_or_else(|| DiffError::Contract(format!("jacobian input must be a vector, got {:?}", x.shape())))?;
    let mut tape = Tape::new();
    let leaf = tape.leaf(x);
    let y = f(&mut tape, &leaf)?;
    let m = vector_len(&y)
        .ok_or_else(|| DiffError::Contract(format!("jacobian output must be a vector, got {:?}", y.shape())))?;
    if !y.is_tracked() {
        return Ok(Tensor::zeros(vec![m, n]));
    }
    let flat = tape.reshape(&y, &[m])?;
    let mut rows = Vec::with_capacity(m * n);
    for i in 0..m {
        let yi = tape.slice(&flat, 0, i, i + 1)?;
        let yi = tape.sum(&yi)?;
        let grads = tape.backward(&yi)?;
        rows.extend_from_slice(grads.get(&leaf).expect("leaf gradient").data());
    }
    Tensor::new(vec![m, n], rows)
}
