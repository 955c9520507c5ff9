//! Minimal dense NCHW tensor engine with reverse-mode differentiation.
//!
//! The engine covers exactly the layers the segmentation and discriminator
//! networks need. Values are stored in `f32` for training and serialization;
//! every reduction (convolution inner products, loss sums, pooling means)
//! accumulates in `f64`. The whole engine is generic over the element type so
//! the finite-difference gradient checker can run the identical graph code
//! end-to-end in `f64`.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::grad_check;
pub use optim::{OptKind, OptimizerState};
pub use tape::{Gradients, Pad, Tape, Var};

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims {0}x{1} not divisible by stride {2}")]
    IndivisibleSpatialDims(usize, usize, usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("pixel weights sum to zero")]
    AllZeroWeights,
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(u8, usize),
    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),
    #[error("gradient check requires a scalar-valued graph")]
    NonScalarOutput,
    #[error("invalid operation: {0}")]
    Invalid(String),
}

/// Element type of a tensor: `f32` in production, `f64` under the gradient
/// checker.
pub trait Scalar:
    num_traits::Float + num_traits::NumCast + Default + fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("f64 value representable")
    }
    fn as_f64(self) -> f64 {
        num_traits::cast(self).expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major (n, c, h, w) extent, w fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A dense value, optionally carrying a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub shape: Shape,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "buffer of {} elements for shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(Shape::new(1, 1, 1, 1), vec![value]).expect("scalar shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Lossless for f32 -> f64; rounds for f64 -> f32.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn ensure_grad(&mut self) -> &mut Vec<T> {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        let g = self.ensure_grad();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }
}
