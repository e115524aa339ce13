#![allow(clippy::needless_range_loop)]

use std::rc::Rc;

use super::kernels;
use super::tape::{Node, NodeId};
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// A recorded operation and whatever it saved for the reverse pass.
pub(crate) enum Op<T: Scalar> {
    Constant,
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[.., n] + [n]`, bias broadcast over leading axes.
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// Rows of `visible` placed at `idx`, every other row a copy of `fill`.
    MergeRows {
        visible: NodeId,
        fill: NodeId,
        idx: Vec<usize>,
    },
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SmoothL1(NodeId, T),
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Constant | Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Scale(a, _) | Relu(a) | Gelu(a) | Softmax(a, _) | Transpose(a) | Reshape(a) => vec![*a],
            SliceCols(a, _) | SliceRows(a, _) | GatherRows(a, _) => vec![*a],
            MeanRows(a) | SumAll(a) | MeanAll(a) | SmoothL1(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(parts) | ConcatRows(parts) => parts.clone(),
            MergeRows { visible, fill, .. } => vec![*visible, *fill],
        }
    }

    /// Vector-Jacobian products for every input that requires a gradient.
    pub(crate) fn vjp(&self, nodes: &[Node<T>], out: &Tensor<T>, dy: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let val = |id: NodeId| -> &Tensor<T> { &nodes[id].value };
        let needs = |id: NodeId| nodes[id].requires_grad;
        let mut grads = Vec::new();
        let mut emit = |id: NodeId, f: &mut dyn FnMut() -> Result<Tensor<T>>| -> Result<()> {
            if needs(id) {
                grads.push((id, f()?));
            }
            Ok(())
        };

        match self {
            Op::Constant | Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                emit(*a, &mut || dy.matmul(&val(*b).transpose()?))?;
                emit(*b, &mut || val(*a).transpose()?.matmul(dy))?;
            }
            Op::Add(a, b) => {
                emit(*a, &mut || Ok(dy.clone()))?;
                emit(*b, &mut || Ok(dy.clone()))?;
            }
            Op::Sub(a, b) => {
                emit(*a, &mut || Ok(dy.clone()))?;
                emit(*b, &mut || Ok(dy.map(|g| -g)))?;
            }
            Op::Mul(a, b) => {
                emit(*a, &mut || Ok(zip_map(dy, val(*b), |g, y| g * y)))?;
                emit(*b, &mut || Ok(zip_map(dy, val(*a), |g, x| g * x)))?;
            }
            Op::AddRow(a, bias) => {
                emit(*a, &mut || Ok(dy.clone()))?;
                emit(*bias, &mut || {
                    let n = val(*bias).numel();
                    let rows = dy.numel() / n;
                    Tensor::new(val(*bias).shape().to_vec(), kernels::sum_rows(dy.data(), rows, n))
                })?;
            }
            Op::Scale(a, c) => emit(*a, &mut || Ok(dy.map(|g| g * *c)))?,
            Op::Relu(a) => emit(*a, &mut || {
                Ok(zip_map(dy, val(*a), |g, x| if x > T::zero() { g } else { T::zero() }))
            })?,
            Op::Gelu(a) => emit(*a, &mut || Ok(zip_map(dy, val(*a), |g, x| g * kernels::gelu_grad(x))))?,
            Op::Softmax(a, axis) => emit(*a, &mut || {
                Tensor::new(
                    out.shape().to_vec(),
                    kernels::softmax_backward(out.data(), dy.data(), out.shape(), *axis),
                )
            })?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let width = val(*gain).numel();
                let rows = xv.numel() / width;
                let xhat: Vec<T> = xv
                    .data()
                    .chunks(width)
                    .zip(mean.iter().zip(rstd))
                    .flat_map(|(row, (&m, &r))| row.iter().map(move |&v| (v - m) * r))
                    .collect();
                emit(*x, &mut || {
                    let g = val(*gain).data();
                    let n = T::of(width as f64);
                    let mut dx = vec![T::zero(); xv.numel()];
                    for r in 0..rows {
                        let span = r * width..(r + 1) * width;
                        let dxhat: Vec<T> = dy.data()[span.clone()].iter().zip(g).map(|(&d, &gg)| d * gg).collect();
                        let xh = &xhat[span.clone()];
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum();
                        for (j, o) in dx[span].iter_mut().enumerate() {
                            *o = rstd[r] / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    Tensor::new(xv.shape().to_vec(), dx)
                })?;
                emit(*gain, &mut || {
                    let prod: Vec<T> = dy.data().iter().zip(&xhat).map(|(&d, &h)| d * h).collect();
                    Tensor::new(val(*gain).shape().to_vec(), kernels::sum_rows(&prod, rows, width))
                })?;
                emit(*bias, &mut || {
                    Tensor::new(val(*bias).shape().to_vec(), kernels::sum_rows(dy.data(), rows, width))
                })?;
            }
            Op::Transpose(a) => emit(*a, &mut || dy.transpose())?,
            Op::Reshape(a) => emit(*a, &mut || dy.clone().reshape(val(*a).shape().to_vec()))?,
            Op::SliceCols(a, start) => emit(*a, &mut || {
                let (rows, cols) = val(*a).dims2()?;
                let width = dy.dims2()?.1;
                let mut g = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + width].copy_from_slice(dy.row(r));
                }
                Tensor::new(vec![rows, cols], g)
            })?,
            Op::ConcatCols(parts) => {
                let (rows, total) = dy.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let width = val(p).dims2()?.1;
                    emit(p, &mut || {
                        let mut g = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            g.extend_from_slice(&dy.data()[r * total + offset..r * total + offset + width]);
                        }
                        Tensor::new(vec![rows, width], g)
                    })?;
                    offset += width;
                }
            }
            Op::SliceRows(a, start) => emit(*a, &mut || {
                let (rows, cols) = val(*a).dims2()?;
                let mut g = vec![T::zero(); rows * cols];
                g[start * cols..start * cols + dy.numel()].copy_from_slice(dy.data());
                Tensor::new(vec![rows, cols], g)
            })?,
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    emit(p, &mut || {
                        Tensor::new(val(p).shape().to_vec(), dy.data()[offset..offset + len].to_vec())
                    })?;
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => emit(*a, &mut || {
                let (rows, cols) = val(*a).dims2()?;
                let mut g = vec![T::zero(); rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &d) in g[i * cols..(i + 1) * cols].iter_mut().zip(dy.row(k)) {
                        *o += d;
                    }
                }
                Tensor::new(vec![rows, cols], g)
            })?,
            Op::MergeRows { visible, fill, idx } => {
                emit(*visible, &mut || dy.select_rows(idx))?;
                emit(*fill, &mut || {
                    let (rows, cols) = dy.dims2()?;
                    let mut taken = vec![false; rows];
                    idx.iter().for_each(|&i| taken[i] = true);
                    let mut g = vec![T::zero(); cols];
                    for r in (0..rows).filter(|&r| !taken[r]) {
                        for (o, &d) in g.iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                    Tensor::new(val(*fill).shape().to_vec(), g)
                })?;
            }
            Op::MeanRows(a) => emit(*a, &mut || {
                let (rows, cols) = val(*a).dims2()?;
                let n = T::of(rows as f64);
                let row: Vec<T> = dy.data().iter().map(|&d| d / n).collect();
                Tensor::new(vec![rows, cols], row.repeat(rows))
            })?,
            Op::SumAll(a) => emit(*a, &mut || Ok(Tensor::full(val(*a).shape().to_vec(), dy.data()[0])))?,
            Op::MeanAll(a) => emit(*a, &mut || {
                let n = T::of(val(*a).numel() as f64);
                Ok(Tensor::full(val(*a).shape().to_vec(), dy.data()[0] / n))
            })?,
            Op::SmoothL1(a, beta) => emit(*a, &mut || {
                Ok(zip_map(dy, val(*a), |g, x| g * kernels::smooth_l1_grad(x, *beta)))
            })?,
        }
        Ok(grads)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn check_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&rhs)?;
        let out = self.value().matmul(&rhs.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, rhs.id)))
    }

    fn binary(self, rhs: Var<'t, T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        same_shape(what, &a, &b)?;
        Ok(zip_map(&a, &b, f))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.binary(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.push(out, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.binary(rhs, "sub", |x, y| x - y)?;
        Ok(self.tape.push(out, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.binary(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.push(out, Op::Mul(self.id, rhs.id)))
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&bias)?;
        let (a, b) = (self.value(), bias.value());
        let n = b.numel();
        if b.rank() != 1 || a.shape().last() != Some(&n) {
            return Err(Error::Dimension(format!("add_row: {:?} + {:?}", a.shape(), b.shape())));
        }
        let data = a
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn relu(self) -> Var<'t, T> {
        let out = self.value().map(|x| x.max(T::zero()));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(kernels::gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.value().softmax(axis)?;
        Ok(self.unary(out, Op::Softmax(self.id, axis)))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.check_tape(&gain)?;
        self.check_tape(&bias)?;
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let width = g.numel();
        if x.shape().last() != Some(&width) || b.numel() != width {
            return Err(Error::Dimension(format!(
                "layer_norm over {:?} with gain {:?}, bias {:?}",
                x.shape(),
                g.shape(),
                b.shape()
            )));
        }
        let (mean, rstd) = kernels::layer_norm_stats(x.data(), width, eps);
        let mut data = Vec::with_capacity(x.numel());
        for (r, row) in x.data().chunks(width).enumerate() {
            for j in 0..width {
                data.push((row[j] - mean[r]) * rstd[r] * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = self.value().as_ref().clone().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        if start + width > cols {
            return Err(Error::Dimension(format!(
                "columns {start}..{} of {cols}",
                start + width
            )));
        }
        let data = (0..rows)
            .flat_map(|r| v.row(r)[start..start + width].iter().copied())
            .collect();
        let out = Tensor::new(vec![rows, width], data)?;
        Ok(self.unary(out, Op::SliceCols(self.id, start)))
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = values[0].dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            first.check_tape(p)?;
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols rows {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(first
            .tape
            .push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        if start + len > rows {
            return Err(Error::Dimension(format!("rows {start}..{} of {rows}", start + len)));
        }
        let out = Tensor::new(vec![len, cols], v.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.unary(out, Op::SliceRows(self.id, start)))
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        for p in parts {
            first.check_tape(p)?;
        }
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(Rc::as_ref).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(first
            .tape
            .push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().select_rows(idx)?;
        Ok(self.unary(out, Op::GatherRows(self.id, idx.to_vec())))
    }

    /// Builds an `[n × cols]` matrix with row `idx[k]` taken from row `k` of
    /// `self` and every remaining row set to `fill`.
    pub fn merge_rows(self, fill: Var<'t, T>, idx: &[usize], n: usize) -> Result<Var<'t, T>> {
        self.check_tape(&fill)?;
        let (v, f) = (self.value(), fill.value());
        let (rows, cols) = v.dims2()?;
        if rows != idx.len() || f.numel() != cols {
            return Err(Error::Dimension(format!(
                "merge_rows: {rows} rows for {} slots, fill {:?} vs width {cols}",
                idx.len(),
                f.shape()
            )));
        }
        let mut data = f.data().repeat(n);
        let mut seen = vec![false; n];
        for (k, &i) in idx.iter().enumerate() {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("merge_rows: bad slot {i}")));
            }
            data[i * cols..(i + 1) * cols].copy_from_slice(v.row(k));
        }
        let out = Tensor::new(vec![n, cols], data)?;
        Ok(self.tape.push(
            out,
            Op::MergeRows {
                visible: self.id,
                fill: fill.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Column means of a matrix, as a `[cols]` vector.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let out = self.value().mean_rows()?;
        Ok(self.unary(out, Op::MeanRows(self.id)))
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        Ok(self.unary(out, Op::MeanAll(self.id)))
    }

    /// Elementwise smooth-L1 with transition point `beta`.
    pub fn smooth_l1(self, beta: T) -> Result<Var<'t, T>> {
        if beta <= T::zero() {
            return Err(Error::Contract("smooth_l1 beta must be positive".into()));
        }
        let out = self.value().map(|x| kernels::smooth_l1(x, beta));
        Ok(self.unary(out, Op::SmoothL1(self.id, beta)))
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}
