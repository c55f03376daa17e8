//! Dense tensors, CNN kernels and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is an immutable row-major array of `f64`. The pure kernels in
//! [`ops`] are shared by the tape ([`Tape`]) and by the inference paths in
//! `quant`, so a value computed on the tape is bit-identical to the same value
//! computed without it.

mod adam;
pub mod ops;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{ConvParams, PoolParams};
pub use tape::{Gradients, MixMatrices, Tape, Var, NORM_STD_FLOOR};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data length and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels that already guarantee the shape.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Population variance over all elements.
    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / self.numel() as f64
    }

    pub(crate) fn ensure_finite(self, op: &str) -> Result<Tensor> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.is_empty() || end > self.shape[0] || start >= end {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} out of bounds for {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_raw(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
