//! Dense row-major tensors and the fixed layer set of the classifier.
//!
//! Every layer comes as a forward function plus a paired backward function
//! that takes the upstream gradient. There is no autograd graph: the model
//! module wires the layers together by hand.

mod gemm;
pub mod gradcheck;
mod layers;
mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{
    conv2d, conv2d_backward, dense, dense_backward, maxpool2, maxpool2_backward, relu,
    relu_backward, softmax, softmax_cross_entropy, ConvGrads, DenseGrads, PoolOutput,
};
pub use optim::{he_init, sgd_momentum_step, Parameter};

/// Floating point scalar usable by every kernel.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("every Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numeric precision selector for training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but data has {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDimension(Vec<usize>),
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in {what}")]
    NonFinite { op: &'static str, what: &'static str },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("target {target} at row {row} is out of range for {classes} classes")]
    TargetOutOfRange {
        row: usize,
        target: usize,
        classes: usize,
    },
    #[error("maxpool2 needs even spatial dimensions, got {height}x{width}")]
    OddPoolInput { height: usize, width: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Sum of elementwise products with `other`.
    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub(crate) fn require_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank {rank}, got shape {:?}", self.shape),
            });
        }
        Ok(())
    }

    pub(crate) fn require_finite(&self, op: &'static str, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op, what })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { expected: 6, .. })
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroDimension(_))
        ));
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f32>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshape(vec![4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![3]).is_err());
    }
}
