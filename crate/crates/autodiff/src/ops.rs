//! Primitive tensor operations.
//!
//! Every primitive checks shapes, computes the forward value, verifies the
//! result is finite and, when any input requires gradients, records a graph
//! node. Backward rules live in [`vjp`] and are themselves written in terms
//! of these primitives, which is what makes the backward pass differentiable.

use crate::error::{AdError, Result};
use crate::tensor::{GraphNode, Tensor};

/// Identifier of a primitive, including whatever constants its backward rule
/// needs (exponents, clamp bounds, gather indices).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Negate,
    Matmul,
    Transpose,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Power { exponent: f64 },
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    LogSoftmax,
    ConcatRows,
    IndexSelect { indices: Vec<usize> },
    Reshape { shape: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Negate => "negate",
            Primitive::Matmul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::Power { .. } => "power",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::ConcatRows => "concat_rows",
            Primitive::IndexSelect { .. } => "index_select",
            Primitive::Reshape { .. } => "reshape",
        }
    }
}

/// Dispatch a primitive over its inputs. The named functions below are the
/// same operations with compile-time arity.
pub fn apply_primitive(op: &Primitive, inputs: &[Tensor]) -> Result<Tensor> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            Err(AdError::Arity {
                op: op.name(),
                expected: n,
                got: inputs.len(),
            })
        } else {
            Ok(())
        }
    };
    match op {
        Primitive::Add => {
            need(2)?;
            add(&inputs[0], &inputs[1])
        }
        Primitive::Sub => {
            need(2)?;
            sub(&inputs[0], &inputs[1])
        }
        Primitive::Mul => {
            need(2)?;
            mul(&inputs[0], &inputs[1])
        }
        Primitive::Scale => {
            need(2)?;
            scale(&inputs[0], &inputs[1])
        }
        Primitive::Negate => {
            need(1)?;
            negate(&inputs[0])
        }
        Primitive::Matmul => {
            need(2)?;
            matmul(&inputs[0], &inputs[1])
        }
        Primitive::Transpose => {
            need(1)?;
            transpose(&inputs[0])
        }
        Primitive::Tanh => {
            need(1)?;
            tanh(&inputs[0])
        }
        Primitive::Exp => {
            need(1)?;
            exp(&inputs[0])
        }
        Primitive::Log => {
            need(1)?;
            log(&inputs[0])
        }
        Primitive::Sqrt => {
            need(1)?;
            sqrt(&inputs[0])
        }
        Primitive::Square => {
            need(1)?;
            square(&inputs[0])
        }
        Primitive::Power { exponent } => {
            need(1)?;
            power(&inputs[0], *exponent)
        }
        Primitive::Clamp { lo, hi } => {
            need(1)?;
            clamp(&inputs[0], *lo, *hi)
        }
        Primitive::Sum => {
            need(1)?;
            sum(&inputs[0])
        }
        Primitive::Mean => {
            need(1)?;
            mean(&inputs[0])
        }
        Primitive::LogSoftmax => {
            need(1)?;
            log_softmax(&inputs[0])
        }
        Primitive::ConcatRows => concat_rows(inputs),
        Primitive::IndexSelect { indices } => {
            need(1)?;
            index_select(&inputs[0], indices)
        }
        Primitive::Reshape { shape } => {
            need(1)?;
            reshape(&inputs[0], shape)
        }
    }
}

fn finish(op: Primitive, parents: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(AdError::NonFinite { op: op.name() });
    }
    let requires_grad = parents.iter().any(Tensor::requires_grad);
    let node = if requires_grad {
        Some(GraphNode { op, parents })
    } else {
        None
    };
    Ok(Tensor::from_parts(shape, data, requires_grad, node))
}

// Elementwise binaries broadcast only a one-element tensor against the other
// operand; any other shape mismatch is an error.
fn binary_elementwise(
    op: Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (shape, data) = if a.shape() == b.shape() {
        (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    } else if b.is_scalar() {
        let y = b.data()[0];
        (a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
    } else if a.is_scalar() {
        let x = a.data()[0];
        (b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
    } else {
        return Err(AdError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };
    finish(op, vec![a.clone(), b.clone()], shape, data)
}

fn unary(op: Primitive, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| f(x)).collect();
    finish(op, vec![a.clone()], a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_elementwise(Primitive::Add, a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_elementwise(Primitive::Sub, a, b, |x, y| x - y)
}

/// Elementwise product (or scalar broadcast).
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_elementwise(Primitive::Mul, a, b, |x, y| x * y)
}

/// Multiply a tensor by a one-element tensor.
pub fn scale(t: &Tensor, s: &Tensor) -> Result<Tensor> {
    if !s.is_scalar() {
        return Err(AdError::ShapeMismatch {
            op: "scale",
            lhs: t.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    binary_elementwise(Primitive::Scale, t, s, |x, y| x * y)
}

/// Multiply by an f64 constant.
pub fn scale_const(t: &Tensor, c: f64) -> Result<Tensor> {
    scale(t, &Tensor::scalar(c))
}

/// Add an f64 constant.
pub fn add_const(t: &Tensor, c: f64) -> Result<Tensor> {
    add(t, &Tensor::scalar(c))
}

pub fn negate(a: &Tensor) -> Result<Tensor> {
    unary(Primitive::Negate, a, |x| -x)
}

pub fn tanh(a: &Tensor) -> Result<Tensor> {
    unary(Primitive::Tanh, a, f64::tanh)
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    unary(Primitive::Exp, a, f64::exp)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = a.data().iter().find(|v| **v <= 0.0) {
        return Err(AdError::Domain {
            op: "log",
            msg: format!("log of non-positive value {bad}"),
        });
    }
    unary(Primitive::Log, a, f64::ln)
}

pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = a.data().iter().find(|v| **v < 0.0) {
        return Err(AdError::Domain {
            op: "sqrt",
            msg: format!("sqrt of negative value {bad}"),
        });
    }
    unary(Primitive::Sqrt, a, f64::sqrt)
}

pub fn square(a: &Tensor) -> Result<Tensor> {
    unary(Primitive::Square, a, |x| x * x)
}

/// Elementwise `x^p` for a constant exponent.
pub fn power(a: &Tensor, exponent: f64) -> Result<Tensor> {
    if exponent.fract() != 0.0 {
        if let Some(&bad) = a.data().iter().find(|v| **v < 0.0) {
            return Err(AdError::Domain {
                op: "power",
                msg: format!("fractional power of negative value {bad}"),
            });
        }
    }
    unary(Primitive::Power { exponent }, a, |x| x.powf(exponent))
}

/// Clamp into `[lo, hi]`. The gradient passes through on `[lo, hi]` and is
/// zero outside.
pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if lo > hi {
        return Err(AdError::Domain {
            op: "clamp",
            msg: format!("empty range [{lo}, {hi}]"),
        });
    }
    unary(Primitive::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
}

/// Sum of all elements, producing a scalar.
pub fn sum(a: &Tensor) -> Result<Tensor> {
    let total: f64 = a.data().iter().sum();
    finish(Primitive::Sum, vec![a.clone()], vec![], vec![total])
}

/// Mean of all elements, producing a scalar.
pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.numel() == 0 {
        return Err(AdError::Domain {
            op: "mean",
            msg: "mean of empty tensor".into(),
        });
    }
    let total: f64 = a.data().iter().sum();
    let m = total / a.numel() as f64;
    finish(Primitive::Mean, vec![a.clone()], vec![], vec![m])
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(AdError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = matrix_dims("matmul", a)?;
    let (kb, n) = matrix_dims("matmul", b)?;
    if ka != kb {
        return Err(AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o_off = i * n;
        for (kk, &aik) in ad[i * ka..(i + 1) * ka].iter().enumerate() {
            let b_off = kk * n;
            for (o, &bv) in out[o_off..o_off + n].iter_mut().zip(&bd[b_off..b_off + n]) {
                *o += aik * bv;
            }
        }
    }
    finish(Primitive::Matmul, vec![a.clone(), b.clone()], vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("transpose", a)?;
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    finish(Primitive::Transpose, vec![a.clone()], vec![n, m], out)
}

/// Log-softmax along the last axis of a vector or matrix, computed with the
/// usual max-shift for stability.
pub fn log_softmax(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match a.shape() {
        [c] => (1usize, *c),
        [r, c] => (*r, *c),
        other => {
            return Err(AdError::ShapeMismatch {
                op: "log_softmax",
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if cols == 0 {
        return Err(AdError::Domain {
            op: "log_softmax",
            msg: "empty rows".into(),
        });
    }
    let ad = a.data();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &ad[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    finish(Primitive::LogSoftmax, vec![a.clone()], a.shape().to_vec(), out)
}

/// Stack matrices with equal column counts along the row axis.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(AdError::Arity {
            op: "concat_rows",
            expected: 1,
            got: 0,
        });
    }
    let (_, cols) = matrix_dims("concat_rows", &parts[0])?;
    let mut rows = 0usize;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = matrix_dims("concat_rows", p)?;
        if c != cols {
            return Err(AdError::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![rows, cols],
                rhs: p.shape().to_vec(),
            });
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    finish(Primitive::ConcatRows, parts.to_vec(), vec![rows, cols], data)
}

/// Gather rows of a matrix (or elements of a vector) by index, with
/// repetition allowed.
pub fn index_select(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (rows, cols, vector) = match a.shape() {
        [n] => (*n, 1usize, true),
        [r, c] => (*r, *c, false),
        other => {
            return Err(AdError::ShapeMismatch {
                op: "index_select",
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    let ad = a.data();
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &ix in indices {
        if ix >= rows {
            return Err(AdError::IndexOutOfRange {
                op: "index_select",
                index: ix,
                size: rows,
            });
        }
        data.extend_from_slice(&ad[ix * cols..(ix + 1) * cols]);
    }
    let shape = if vector {
        vec![indices.len()]
    } else {
        vec![indices.len(), cols]
    };
    finish(
        Primitive::IndexSelect {
            indices: indices.to_vec(),
        },
        vec![a.clone()],
        shape,
        data,
    )
}

/// Reinterpret the same elements under a new shape.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(AdError::ShapeDataMismatch {
            len: a.numel(),
            shape: shape.to_vec(),
        });
    }
    finish(
        Primitive::Reshape {
            shape: shape.to_vec(),
        },
        vec![a.clone()],
        shape.to_vec(),
        a.data().to_vec(),
    )
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

// Gradient of a broadcast binary for one operand: reduce to a scalar when the
// operand was broadcast, otherwise keep the full gradient.
fn reduce_for(operand: &Tensor, grad_full: Tensor) -> Result<Tensor> {
    if grad_full.shape() == operand.shape() {
        Ok(grad_full)
    } else {
        // operand was the scalar side
        let s = sum(&grad_full)?;
        if operand.shape().is_empty() {
            Ok(s)
        } else {
            reshape(&s, operand.shape())
        }
    }
}

// One-hot selection matrix taking `rows` rows of a source with `n` rows.
fn selection_matrix(indices: &[usize], n: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * n];
    for (r, &ix) in indices.iter().enumerate() {
        data[r * n + ix] = 1.0;
    }
    Tensor::from_parts(vec![indices.len(), n], data, false, None)
}

/// Vector-Jacobian products of one primitive. `parents` and `output` are the
/// recorded forward tensors, `grad` is the incoming cotangent. Entries of
/// `needs` mark which parents require a gradient; others come back as `None`.
///
/// Every rule is built from the primitives above, so with live (graph-bearing)
/// arguments the returned gradients are differentiable again.
pub(crate) fn vjp(
    op: &Primitive,
    parents: &[Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let one = |v: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(v?)]) };
    match op {
        Primitive::Add => {
            let ga = if needs[0] {
                Some(reduce_for(&parents[0], grad.clone())?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(reduce_for(&parents[1], grad.clone())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Primitive::Sub => {
            let ga = if needs[0] {
                Some(reduce_for(&parents[0], grad.clone())?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(reduce_for(&parents[1], negate(grad)?)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Primitive::Mul | Primitive::Scale => {
            let ga = if needs[0] {
                Some(reduce_for(&parents[0], mul(grad, &parents[1])?)?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(reduce_for(&parents[1], mul(grad, &parents[0])?)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Primitive::Negate => one(negate(grad)),
        Primitive::Matmul => {
            let ga = if needs[0] {
                Some(matmul(grad, &transpose(&parents[1])?)?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(matmul(&transpose(&parents[0])?, grad)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Primitive::Transpose => one(transpose(grad)),
        Primitive::Tanh => {
            // 1 - y^2, expressed through the recorded output
            let d = sub(&Tensor::scalar(1.0), &square(output)?)?;
            one(mul(grad, &d))
        }
        Primitive::Exp => one(mul(grad, output)),
        Primitive::Log => one(mul(grad, &power(&parents[0], -1.0)?)),
        Primitive::Sqrt => one(scale_const(&mul(grad, &power(&parents[0], -0.5)?)?, 0.5)),
        Primitive::Square => one(scale_const(&mul(grad, &parents[0])?, 2.0)),
        Primitive::Power { exponent } => {
            if *exponent == 0.0 {
                return Ok(vec![Some(Tensor::zeros_like(&parents[0]))]);
            }
            one(scale_const(
                &mul(grad, &power(&parents[0], exponent - 1.0)?)?,
                *exponent,
            ))
        }
        Primitive::Clamp { lo, hi } => {
            let mask: Vec<f64> = parents[0]
                .data()
                .iter()
                .map(|&x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::from_parts(parents[0].shape().to_vec(), mask, false, None);
            one(mul(grad, &mask))
        }
        Primitive::Sum => one(scale(&Tensor::ones(parents[0].shape()), grad)),
        Primitive::Mean => {
            let g = scale_const(grad, 1.0 / parents[0].numel() as f64)?;
            one(scale(&Tensor::ones(parents[0].shape()), &g))
        }
        Primitive::LogSoftmax => {
            // g - softmax(x) * rowsum(g)
            let soft = exp(output)?;
            match output.shape() {
                [_c] => {
                    let rs = sum(grad)?;
                    one(sub(grad, &scale(&soft, &rs)?))
                }
                [_r, c] => {
                    let ones_col = Tensor::ones(&[*c, 1]);
                    let rs = matmul(grad, &ones_col)?;
                    let bc = matmul(&rs, &Tensor::ones(&[1, *c]))?;
                    one(sub(grad, &mul(&soft, &bc)?))
                }
                _ => unreachable!("log_softmax output rank checked at forward"),
            }
        }
        Primitive::ConcatRows => {
            let mut out = Vec::with_capacity(parents.len());
            let mut start = 0usize;
            for (p, need) in parents.iter().zip(needs) {
                let r = p.shape()[0];
                if *need {
                    let idx: Vec<usize> = (start..start + r).collect();
                    out.push(Some(index_select(grad, &idx)?));
                } else {
                    out.push(None);
                }
                start += r;
            }
            Ok(out)
        }
        Primitive::IndexSelect { indices } => {
            // Scatter-add rows of the gradient back to the source, expressed
            // as P^T * grad with a constant selection matrix.
            let src = &parents[0];
            match src.shape() {
                [n] => {
                    let p = selection_matrix(indices, *n);
                    let g2 = reshape(grad, &[indices.len(), 1])?;
                    let scat = matmul(&transpose(&p)?, &g2)?;
                    one(reshape(&scat, &[*n]))
                }
                [n, _c] => {
                    let p = selection_matrix(indices, *n);
                    one(matmul(&transpose(&p)?, grad))
                }
                _ => unreachable!("index_select input rank checked at forward"),
            }
        }
        Primitive::Reshape { .. } => one(reshape(grad, parents[0].shape())),
    }
}

// ---------------------------------------------------------------------------
// Compositions used throughout the model code
// ---------------------------------------------------------------------------

/// Repeat a `[1, n]` row `m` times into an `[m, n]` matrix.
pub fn broadcast_rows(row: &Tensor, m: usize) -> Result<Tensor> {
    matmul(&Tensor::ones(&[m, 1]), row)
}

/// Row sums of a matrix, as an `[m, 1]` column.
pub fn row_sums(t: &Tensor) -> Result<Tensor> {
    let (_, c) = matrix_dims("row_sums", t)?;
    matmul(t, &Tensor::ones(&[c, 1]))
}

/// Column means of a matrix, as a `[1, n]` row.
pub fn col_means(t: &Tensor) -> Result<Tensor> {
    let (r, _) = matrix_dims("col_means", t)?;
    if r == 0 {
        return Err(AdError::Domain {
            op: "col_means",
            msg: "no rows".into(),
        });
    }
    let w = Tensor::from_parts(vec![1, r], vec![1.0 / r as f64; r], false, None);
    matmul(&w, t)
}

/// Per-row entries `t[i, picks[i]]` as an `[m, 1]` column.
pub fn pick_per_row(t: &Tensor, picks: &[usize]) -> Result<Tensor> {
    let (r, c) = matrix_dims("pick_per_row", t)?;
    if picks.len() != r {
        return Err(AdError::ShapeMismatch {
            op: "pick_per_row",
            lhs: vec![r, c],
            rhs: vec![picks.len()],
        });
    }
    let mut mask = vec![0.0; r * c];
    for (i, &p) in picks.iter().enumerate() {
        if p >= c {
            return Err(AdError::IndexOutOfRange {
                op: "pick_per_row",
                index: p,
                size: c,
            });
        }
        mask[i * c + p] = 1.0;
    }
    let mask = Tensor::from_parts(vec![r, c], mask, false, None);
    row_sums(&mul(t, &mask)?)
}
