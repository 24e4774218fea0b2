//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array with an optional gradient buffer.
///
/// Activations use the layout `[batch, channel, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            dims,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, S::zero())
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; n]).expect("positive dims")
    }

    pub fn scalar(value: S) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            dims.to_vec(),
            values.iter().map(|&v| S::from_f64_lossy(v)).collect(),
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient has {} values, tensor {}", g.len(), self.data.len()),
            ));
        }
        let slot = self.grad.get_or_insert_with(|| vec![S::zero(); g.len()]);
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims;
        self.grad = None;
        Ok(self)
    }

    /// Interprets the trailing two dims as height and width.
    pub fn spatial(&self) -> (usize, usize) {
        let r = self.dims.len();
        match r {
            0 => (1, 1),
            1 => (1, self.dims[0]),
            _ => (self.dims[r - 2], self.dims[r - 1]),
        }
    }

    /// Checked `[n, c, h, w]` view.
    pub fn nchw(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.dims.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", self.dims))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn min_max(&self) -> (S, S) {
        self.data.iter().fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }
}
