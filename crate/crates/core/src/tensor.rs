//! Dense row-major tensors.
//!
//! Shapes are explicit and checked: every constructor enforces
//! `product(shape) == values.len()`. A scalar is a rank-0 tensor with a
//! single value. The forward kernels shared by the recording and
//! no-grad code paths live here so both compute bit-identical results.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_values(shape: &[usize], values: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, numel, values.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![S::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    /// Interprets the tensor as a matrix, returning (rows, cols).
    ///
    /// Rank-1 tensors are viewed as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::shape(
                "dims2",
                format!("expected rank 1 or 2, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (rows, cols) = self.dims2().expect("row() on non-matrix");
        assert!(r < rows);
        &self.values[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| T::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// y = x · weightᵀ + bias, with x: [m, in], weight: [out, in], bias: [out].
pub(crate) fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (m, x_in) = x.dims2()?;
    let (out, w_in) = weight.dims2()?;
    if x_in != w_in || bias.len() != out {
        return Err(Error::shape(
            "linear",
            format!(
                "x {:?} · weightᵀ {:?} + bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let xv = x.values();
    let wv = weight.values();
    let bv = bias.values();
    let mut y = vec![S::zero(); m * out];
    for r in 0..m {
        let xrow = &xv[r * x_in..(r + 1) * x_in];
        let yrow = &mut y[r * out..(r + 1) * out];
        for o in 0..out {
            let wrow = &wv[o * w_in..(o + 1) * w_in];
            let mut acc = bv[o];
            for i in 0..x_in {
                acc = acc + xrow[i] * wrow[i];
            }
            yrow[o] = acc;
        }
    }
    Tensor::from_values(&[m, out], y)
}

pub(crate) fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for v in out.values_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    out.requires_grad = false;
    out
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for i in 0..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

pub(crate) fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}
