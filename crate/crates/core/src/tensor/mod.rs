//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain value: shape plus contiguous data, no gradient
//! bookkeeping. Differentiable computation happens on a [`Tape`], whose
//! [`Var`] handles wrap tensors recorded as graph nodes. Training runs in
//! `f32`; everything is generic over [`Scalar`] so gradient checks can run
//! the same code in `f64`.

pub mod io;
pub(crate) mod kernels;
mod ops;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};

/// Floating-point element type a [`Tensor`] can hold.
pub trait Scalar:
    Float + Debug + Display + Default + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("every Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::NAME, self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        if self.data.len() > SHOWN {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul [{m}x{k}] by [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(&self.data, &rhs.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        })
    }

    /// Softmax along `axis`, with the row max subtracted first.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        kernels::check_axis(&self.shape, axis)?;
        if !self.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: kernels::softmax(&self.data, &self.shape, axis),
        })
    }

    /// Stacks equal-width matrices vertically.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.dims2()?.1,
            None => return Err(Error::Contract("nothing to concatenate".into())),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::Dimension(format!("concat widths {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Dimension(format!("row {i} of {r}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![idx.len(), c], data)
    }

    /// Column means of a matrix, as a `[cols]` vector.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if r == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        Ok(Self {
            shape: vec![c],
            data: kernels::mean_rows(&self.data, r, c),
        })
    }
}
