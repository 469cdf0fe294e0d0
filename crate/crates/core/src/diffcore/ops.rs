//! Forward kernels and vector-Jacobian products for every tape operation.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::tensor::Tensor;
use super::{DiffError, Result};

/// Largest 1-norm condition number accepted by [`Op::Solve`].
pub const MAX_CONDITION: f64 = 1e12;

/// Operation kinds understood by [`apply`](super::apply) and [`Tape::apply`](super::Tape::apply).
///
/// Binary elementwise ops accept equal shapes, or one operand whose shape is
/// a suffix of the other's (broadcast over leading batch dimensions; a
/// rank-0 scalar is a suffix of everything).
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    /// Softmax over the last axis, max-subtracted.
    Softmax,
    /// Sum of all entries to a rank-0 scalar.
    Sum,
    /// Sum over the last axis.
    SumLast,
    /// Mean of all entries to a rank-0 scalar.
    Mean,
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Reshape(Vec<usize>),
    ScalarMul(f64),
    AddScalar(f64),
    /// Rank-2 transpose.
    Transpose,
    /// `out[.., i] = in[.., indices[i]]` along the last axis.
    Gather(Arc<[usize]>),
    /// Solve `A X = B` for triangular `A` (`[n, n]`, `[n, k]`). Entries of
    /// `A` outside the triangle (and the diagonal when `unit_diagonal`) are ignored.
    SolveTriangular { lower: bool, unit_diagonal: bool },
    /// Solve `A X = B` for general square `A`; fails when the 1-norm
    /// condition number exceeds [`MAX_CONDITION`].
    Solve,
    /// `log |det A|` of a square matrix, as a rank-0 scalar.
    LogDet,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Sum => "sum",
            Op::SumLast => "sum_last",
            Op::Mean => "mean",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::ScalarMul(_) => "scalar_mul",
            Op::AddScalar(_) => "add_scalar",
            Op::Transpose => "transpose",
            Op::Gather(_) => "gather",
            Op::SolveTriangular { .. } => "solve_triangular",
            Op::Solve => "solve",
            Op::LogDet => "logdet",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul => Some(2),
            Op::SolveTriangular { .. } | Op::Solve => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Result of a forward kernel: the value plus anything the adjoint needs
/// beyond inputs and output.
pub(crate) struct Evaluated {
    pub value: Tensor,
    pub extra: Option<Arc<[f64]>>,
}

fn mismatch(op: &Op, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch { op: op.name().into(), lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs repeats over lhs
    Rhs,
    /// lhs repeats over rhs
    Lhs,
}

fn broadcast(op: &Op, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if is_suffix(b.shape(), a.shape()) {
        Ok(Broadcast::Rhs)
    } else if is_suffix(a.shape(), b.shape()) {
        Ok(Broadcast::Lhs)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn binary_map(a: &Tensor, b: &Tensor, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    match mode {
        Broadcast::Same => Tensor::from_parts(
            a.shape().to_vec(),
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::Rhs => {
            let n = bd.len();
            Tensor::from_parts(
                a.shape().to_vec(),
                ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect(),
            )
        }
        Broadcast::Lhs => {
            let n = ad.len();
            Tensor::from_parts(
                b.shape().to_vec(),
                bd.iter().enumerate().map(|(i, &y)| f(ad[i % n], y)).collect(),
            )
        }
    }
}

/// Reduce a full-size gradient onto an operand that was broadcast.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is stored [m,k] (or [k,m] when transposed); same for b.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn one_norm(data: &[f64], n: usize) -> f64 {
    (0..n).map(|j| (0..n).map(|i| data[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn square(op: &Op, a: &Tensor) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(DiffError::ShapeMismatch {
            op: op.name().into(),
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(a.shape()[0])
}

/// Outer/axis/inner extents for slicing and concatenation.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Triangular solve of `a x = b` in place on `x` (`[n, k]`).
fn tri_solve(a: &[f64], n: usize, x: &mut [f64], k: usize, lower: bool, unit: bool, transpose: bool) {
    // When `transpose`, solve with a^T: lower becomes upper.
    let effective_lower = lower != transpose;
    let at = |i: usize, j: usize| if transpose { a[j * n + i] } else { a[i * n + j] };
    let order: Box<dyn Iterator<Item = usize>> =
        if effective_lower { Box::new(0..n) } else { Box::new((0..n).rev()) };
    for i in order {
        let (done, rest) = x.split_at_mut(i * k);
        let (row_i, after) = rest.split_at_mut(k);
        let range: Box<dyn Iterator<Item = usize>> =
            if effective_lower { Box::new(0..i) } else { Box::new(i + 1..n) };
        for j in range {
            let coef = at(i, j);
            if coef == 0.0 {
                continue;
            }
            let row_j = if j < i { &done[j * k..(j + 1) * k] } else { &after[(j - i - 1) * k..(j - i) * k] };
            for (xi, xj) in row_i.iter_mut().zip(row_j) {
                *xi -= coef * xj;
            }
        }
        if !unit {
            let d = at(i, i);
            for xi in row_i.iter_mut() {
                *xi /= d;
            }
        }
    }
}

pub(crate) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Evaluated> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(DiffError::Contract(format!(
                "{} expects {} inputs, got {}",
                op.name(),
                n,
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(DiffError::Contract(format!("{} needs at least one input", op.name())));
    }
    let plain = |value: Tensor| Evaluated { value, extra: None };
    let out = match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = broadcast(op, a, b)?;
            let value = match op {
                Op::Add => binary_map(a, b, mode, |x, y| x + y),
                Op::Sub => binary_map(a, b, mode, |x, y| x - y),
                Op::Mul => binary_map(a, b, mode, |x, y| x * y),
                _ => {
                    if b.data().contains(&0.0) {
                        return Err(DiffError::Domain { op: "div".into(), detail: "division by zero".into() });
                    }
                    binary_map(a, b, mode, |x, y| x / y)
                }
            };
            plain(value)
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(op, a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
            plain(Tensor::from_parts(vec![m, n], c))
        }
        Op::Exp => plain(unary(inputs[0], f64::exp)),
        Op::Log => {
            if let Some(v) = inputs[0].data().iter().find(|&&v| v <= 0.0) {
                return Err(DiffError::Domain { op: "log".into(), detail: format!("non-positive entry {v}") });
            }
            plain(unary(inputs[0], f64::ln))
        }
        Op::Tanh => plain(unary(inputs[0], f64::tanh)),
        Op::Sigmoid => plain(unary(inputs[0], sigmoid)),
        Op::Softmax => {
            let a = inputs[0];
            let n = *a.shape().last().ok_or_else(|| mismatch(op, a, a))?;
            let mut out = Vec::with_capacity(a.numel());
            for row in a.data().chunks(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut total = 0.0;
                for &v in row {
                    let e = (v - max).exp();
                    total += e;
                    out.push(e);
                }
                for e in &mut out[start..] {
                    *e /= total;
                }
            }
            plain(Tensor::from_parts(a.shape().to_vec(), out))
        }
        Op::Sum => plain(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::Mean => {
            let a = inputs[0];
            plain(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
        }
        Op::SumLast => {
            let a = inputs[0];
            if a.rank() == 0 {
                return Err(mismatch(op, a, a));
            }
            let n = *a.shape().last().unwrap();
            let data = a.data().chunks(n).map(|r| r.iter().sum()).collect();
            let shape = a.shape()[..a.rank() - 1].to_vec();
            plain(Tensor::from_parts(shape, data))
        }
        Op::Slice { axis, start, end } => {
            let a = inputs[0];
            if *axis >= a.rank() || start >= end || *end > a.shape()[*axis] {
                return Err(DiffError::ShapeMismatch {
                    op: format!("slice[{axis}: {start}..{end}]"),
                    lhs: a.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (outer, len, inner) = split_axis(a.shape(), *axis);
            let width = end - start;
            let mut data = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = width;
            plain(Tensor::from_parts(shape, data))
        }
        Op::Concat { axis } => {
            let first = inputs[0];
            if *axis >= first.rank() {
                return Err(mismatch(op, first, first));
            }
            for t in &inputs[1..] {
                let ok = t.rank() == first.rank()
                    && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == *axis || x == y);
                if !ok {
                    return Err(mismatch(op, first, t));
                }
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            plain(Tensor::from_parts(shape, data))
        }
        Op::Reshape(shape) => plain(inputs[0].reshaped(shape.clone())?),
        Op::ScalarMul(c) => plain(unary(inputs[0], |v| c * v)),
        Op::AddScalar(c) => plain(unary(inputs[0], |v| c + v)),
        Op::Transpose => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(mismatch(op, a, a));
            }
            plain(transpose(a))
        }
        Op::Gather(idx) => {
            let a = inputs[0];
            let n = *a.shape().last().ok_or_else(|| mismatch(op, a, a))?;
            if idx.iter().any(|&i| i >= n) || idx.is_empty() {
                return Err(DiffError::Contract(format!("gather index out of range for width {n}")));
            }
            let mut data = Vec::with_capacity(a.numel() / n * idx.len());
            for row in a.data().chunks(n) {
                data.extend(idx.iter().map(|&i| row[i]));
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = idx.len();
            plain(Tensor::from_parts(shape, data))
        }
        Op::SolveTriangular { lower, unit_diagonal } => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = square(op, a)?;
            if b.rank() != 2 || b.shape()[0] != n {
                return Err(mismatch(op, a, b));
            }
            if !unit_diagonal && (0..n).any(|i| a.data()[i * n + i] == 0.0) {
                return Err(DiffError::Singular { op: op.name().into(), condition: f64::INFINITY });
            }
            let k = b.shape()[1];
            let mut x = b.to_vec();
            tri_solve(a.data(), n, &mut x, k, *lower, *unit_diagonal, false);
            plain(Tensor::from_parts(vec![n, k], x))
        }
        Op::Solve => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = square(op, a)?;
            if b.rank() != 2 || b.shape()[0] != n {
                return Err(mismatch(op, a, b));
            }
            let inv = dmatrix(a)
                .lu()
                .try_inverse()
                .ok_or(DiffError::Singular { op: "solve".into(), condition: f64::INFINITY })?;
            let inv = row_major(&inv);
            let condition = one_norm(a.data(), n) * one_norm(&inv, n);
            if !condition.is_finite() || condition > MAX_CONDITION {
                return Err(DiffError::Singular { op: "solve".into(), condition });
            }
            let k = b.shape()[1];
            let mut x = vec![0.0; n * k];
            gemm(n, n, k, &inv, false, b.data(), false, &mut x, 0.0);
            Evaluated { value: Tensor::from_parts(vec![n, k], x), extra: Some(inv.into()) }
        }
        Op::LogDet => {
            let a = inputs[0];
            let n = square(op, a)?;
            let lu = dmatrix(a).lu();
            let u = lu.u();
            let mut logdet = 0.0;
            for i in 0..n {
                let d = u[(i, i)].abs();
                if d == 0.0 {
                    return Err(DiffError::Domain { op: "logdet".into(), detail: "singular matrix".into() });
                }
                logdet += d.ln();
            }
            let inv = lu
                .try_inverse()
                .ok_or_else(|| DiffError::Domain { op: "logdet".into(), detail: "singular matrix".into() })?;
            Evaluated { value: Tensor::scalar(logdet), extra: Some(row_major(&inv).into()) }
        }
    };
    if out.value.data().iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite { op: op.name().into() });
    }
    Ok(out)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Vector-Jacobian product: gradients of every input for which `needs[i]`.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    extra: Option<&[f64]>,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            // full-size index -> operand index
            let ia = |i: usize| i % na;
            let ib = |i: usize| i % nb;
            if needs[0] {
                let full: Vec<f64> = match op {
                    Op::Add | Op::Sub => g.to_vec(),
                    Op::Mul => elementwise(&|i| g[i] * bd[ib(i)]),
                    _ => elementwise(&|i| g[i] / bd[ib(i)]),
                };
                grads[0] = Some(reduce_to(&full, na));
            }
            if needs[1] {
                let full: Vec<f64> = match op {
                    Op::Add => g.to_vec(),
                    Op::Sub => g.iter().map(|v| -v).collect(),
                    Op::Mul => elementwise(&|i| g[i] * ad[ia(i)]),
                    _ => elementwise(&|i| {
                        let y = bd[ib(i)];
                        -g[i] * ad[ia(i)] / (y * y)
                    }),
                };
                grads[1] = Some(reduce_to(&full, nb));
            }
        }
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, 0.0);
                grads[0] = Some(ga);
            }
            if needs[1] {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb, 0.0);
                grads[1] = Some(gb);
            }
        }
        Op::Exp => grads[0] = Some(elementwise(&|i| g[i] * output.data()[i])),
        Op::Log => grads[0] = Some(elementwise(&|i| g[i] / inputs[0].data()[i])),
        Op::Tanh => {
            grads[0] = Some(elementwise(&|i| {
                let t = output.data()[i];
                g[i] * (1.0 - t * t)
            }))
        }
        Op::Sigmoid => {
            grads[0] = Some(elementwise(&|i| {
                let s = output.data()[i];
                g[i] * s * (1.0 - s)
            }))
        }
        Op::Softmax => {
            let n = *output.shape().last().unwrap();
            let mut out = vec![0.0; g.len()];
            for ((o, s), gr) in out.chunks_mut(n).zip(output.data().chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    o[j] = s[j] * (gr[j] - dot);
                }
            }
            grads[0] = Some(out);
        }
        Op::Sum => grads[0] = Some(vec![g[0]; inputs[0].numel()]),
        Op::Mean => {
            let n = inputs[0].numel();
            grads[0] = Some(vec![g[0] / n as f64; n]);
        }
        Op::SumLast => {
            let n = *inputs[0].shape().last().unwrap();
            let mut out = Vec::with_capacity(inputs[0].numel());
            for &v in g {
                out.extend(std::iter::repeat_n(v, n));
            }
            grads[0] = Some(out);
        }
        Op::Slice { axis, start, end } => {
            let a = &inputs[0];
            let (outer, len, inner) = split_axis(a.shape(), *axis);
            let width = end - start;
            let mut out = vec![0.0; a.numel()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                let src = o * width * inner;
                out[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
            }
            grads[0] = Some(out);
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(output.shape(), *axis);
            let mut offset = 0;
            for (t, (slot, need)) in inputs.iter().zip(grads.iter_mut().zip(needs)) {
                let len = t.shape()[*axis] * inner;
                if *need {
                    let mut out = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        out.extend_from_slice(&g[base..base + len]);
                    }
                    *slot = Some(out);
                }
                offset += len;
            }
        }
        Op::Reshape(_) => grads[0] = Some(g.to_vec()),
        Op::ScalarMul(c) => grads[0] = Some(g.iter().map(|v| c * v).collect()),
        Op::AddScalar(_) => grads[0] = Some(g.to_vec()),
        Op::Transpose => {
            let gt = Tensor::from_parts(output.shape().to_vec(), g.to_vec());
            grads[0] = Some(transpose(&gt).to_vec());
        }
        Op::Gather(idx) => {
            let n = *inputs[0].shape().last().unwrap();
            let mut out = vec![0.0; inputs[0].numel()];
            for (dst, src) in out.chunks_mut(n).zip(g.chunks(idx.len())) {
                for (&i, &v) in idx.iter().zip(src) {
                    dst[i] += v;
                }
            }
            grads[0] = Some(out);
        }
        Op::SolveTriangular { lower, unit_diagonal } => {
            let a = &inputs[0];
            let n = a.shape()[0];
            let k = output.shape()[1];
            let mut gb = g.to_vec();
            tri_solve(a.data(), n, &mut gb, k, *lower, *unit_diagonal, true);
            if needs[0] {
                // gA = -gB X^T restricted to the structural triangle.
                let mut ga = vec![0.0; n * n];
                gemm(n, k, n, &gb, false, output.data(), true, &mut ga, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let keep = if *lower { j < i } else { j > i } || (i == j && !unit_diagonal);
                        ga[i * n + j] = if keep { -ga[i * n + j] } else { 0.0 };
                    }
                }
                grads[0] = Some(ga);
            }
            if needs[1] {
                grads[1] = Some(gb);
            }
        }
        Op::Solve => {
            let inv = extra.expect("solve keeps its inverse");
            let n = inputs[0].shape()[0];
            let k = output.shape()[1];
            let mut gb = vec![0.0; n * k];
            gemm(n, n, k, inv, true, g, false, &mut gb, 0.0);
            if needs[0] {
                let mut ga = vec![0.0; n * n];
                gemm(n, k, n, &gb, false, output.data(), true, &mut ga, 0.0);
                ga.iter_mut().for_each(|v| *v = -*v);
                grads[0] = Some(ga);
            }
            if needs[1] {
                grads[1] = Some(gb);
            }
        }
        Op::LogDet => {
            let inv = extra.expect("logdet keeps its inverse");
            let n = inputs[0].shape()[0];
            let mut ga = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    ga[i * n + j] = g[0] * inv[j * n + i];
                }
            }
            grads[0] = Some(ga);
        }
    }
    for (slot, need) in grads.iter_mut().zip(needs) {
        if !need {
            *slot = None;
        }
    }
    grads
}
