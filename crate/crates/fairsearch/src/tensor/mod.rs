//! Dense n-dimensional tensors and a reverse-mode autodiff tape.
//!
//! The engine covers exactly the primitives the supernet needs: conv2d,
//! pooling, batch norm, linear, the three activations, and the small set of
//! elementwise/reduction glue that the loss functions are composed from.
//! Layout is NCHW for image batches. Storage precision is selectable at the
//! type level: `f64` for correctness tests and oracles, `f32` for cheaper
//! training runs.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions};
pub use ops::Conv2dSpec;
pub use tape::{Gradients, PoolKind, Tape, Var};

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Storage precision tag, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            other => Err(Error::Parse(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// One standard-normal draw, used by parameter initialization.
    fn standard_normal<R: rand::Rng>(rng: &mut R) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn standard_normal<R: rand::Rng>(rng: &mut R) -> Self {
                use rand::distributions::Distribution;
                rand_distr::StandardNormal.sample(rng)
            }
        }
    };
}

impl_element!(f32, Dtype::F32);
impl_element!(f64, Dtype::F64);

/// Numerically stable logistic function.
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Dense n-dimensional value, row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Build a tensor, checking that `product(shape) == data.len()` and that
    /// every extent is positive.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of extent `d`.
    pub fn eye(d: usize) -> Self {
        let mut t = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            t.data[i * d + i] = T::ONE;
        }
        t
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Error if any stored value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{what}: non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    /// Random normal entries scaled by `std`, for tests and initializers.
    pub fn randn<R: rand::Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: T = T::standard_normal(rng);
                z * T::from_f64(std)
            })
            .collect();
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_extent_product() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("6 elements"));
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        assert!(sigmoid(-800.0_f64) >= 0.0);
        assert!(sigmoid(800.0_f64) <= 1.0);
        assert!((sigmoid(-50.0_f64)) < 2e-22);
    }

    #[test]
    fn check_finite_names_the_index() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.data_mut()[2] = f64::NAN;
        let err = t.check_finite("probe").unwrap_err();
        assert!(err.to_string().contains("index 2"));
    }
}
