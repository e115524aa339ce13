//! Slice-level numeric kernels shared by plain tensors and the tape.

use super::Scalar;
use crate::error::{Error, Result};

/// `out += a[m×k] · b[k×n]`, i-k-j loop order.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, k| m.max(x[at(k)]));
            let mut total = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

/// dx = y ⊙ (dy − Σ_axis y·dy)
pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let dot: T = (0..len).map(|k| y[at(k)] * dy[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn mean_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    let n = T::of(rows as f64);
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Per-row normalization statistics over the last axis: (mean, 1/sqrt(var + eps)).
pub(crate) fn layer_norm_stats<T: Scalar>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::of(width as f64);
    x.chunks(width)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .unzip()
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi<T: Scalar>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = sqrt_2_over_pi::<T>() * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let k = sqrt_2_over_pi::<T>();
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let dinner = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// `0.5·x²/β` inside `|x| < β`, `|x| − 0.5·β` outside.
pub(crate) fn smooth_l1<T: Scalar>(x: T, beta: T) -> T {
    let ax = x.abs();
    if ax < beta {
        T::of(0.5) * x * x / beta
    } else {
        ax - T::of(0.5) * beta
    }
}

pub(crate) fn smooth_l1_grad<T: Scalar>(x: T, beta: T) -> T {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Column sums of a `[rows × cols]` buffer.
pub(crate) fn sum_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}
