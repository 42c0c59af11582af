//! Dense row-major tensors with optional gradient buffers.

mod gradcheck;
pub mod linalg;
mod ops;
mod real;

pub use gradcheck::{gradcheck, gradcheck_coords, Differentiable, FnDiff, SCALE_FLOOR, ZERO_ANALYTIC, ZERO_NUMERIC};
pub use ops::{
    elementwise, elementwise_backward, matmul, matmul_backward, softmax, softmax_backward, softmax_rows_inplace,
    transpose, transpose_backward, BinaryOp,
};
pub use real::{Precision, Real};

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, Error, Result};
use crate::rng;

/// Initial contents for [`Tensor::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

/// N-dimensional array stored row-major with the last dimension contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return shape_err("tensor needs at least one dimension");
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return shape_err(format!("dimension {d} of {shape:?} is zero"));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("element count of {shape:?} overflows")))
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], fill: Fill) -> Result<Self> {
        let n = element_count(shape)?;
        let data = match fill {
            Fill::Zeros => vec![T::zero(); n],
            Fill::Ones => vec![T::one(); n],
            Fill::Constant(v) => vec![T::of(v); n],
            Fill::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Parameter(format!("uniform bounds {lo} >= {hi}")));
                }
                let dist = Uniform::new(lo, hi).map_err(|e| Error::Parameter(e.to_string()))?;
                let mut r = rng::stream(seed, 0);
                (0..n).map(|_| T::of(dist.sample(&mut r))).collect()
            }
            Fill::Normal { mean, std, seed } => {
                let dist = Normal::new(mean, std).map_err(|e| Error::Parameter(e.to_string()))?;
                let mut r = rng::stream(seed, 0);
                (0..n).map(|_| T::of(dist.sample(&mut r))).collect()
            }
        };
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Fill::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = element_count(shape)?;
        if n != data.len() {
            return shape_err(format!("shape {shape:?} implies {n} elements, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// The gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` (same shape) into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape != self.shape {
            return shape_err(format!("gradient shape {:?} does not match {:?}", g.shape, self.shape));
        }
        self.accumulate_grad_slice(&g.data);
        Ok(())
    }

    pub(crate) fn accumulate_grad_slice(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        for (a, &b) in self.grad_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = element_count(shape)?;
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} ({} elements) to {shape:?}", self.shape, self.data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone(), grad: None })
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n = element_count(shape)?;
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} ({} elements) to {shape:?}", self.shape, self.data.len()));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(format!("expected a 4-D tensor, got {:?}", self.shape)),
        }
    }

    /// Interprets the tensor as `[N, T, D]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [n, t, d] => Ok((n, t, d)),
            _ => shape_err(format!("expected a 3-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("dot of {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.f64() * b.f64()).sum())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect(), grad: None }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
