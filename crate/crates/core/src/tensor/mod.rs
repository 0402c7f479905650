//! Dense row-major tensors over `f32` or `f64`.
//!
//! Image tensors are channels-last (`B×H×W×C`) everywhere in this crate.

pub(crate) mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

pub use kernels::{ConvGeometry, Padding};

/// Floating-point element type a tensor can hold.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(x: f64) -> Self;

    fn to_le_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_slice(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    fn to_le_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    fn to_le_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    }
}

/// Shorthand for converting an `f64` constant into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Numeric precision used for a run. Gradient checks always run in `Double`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Precision::Single => 1,
            Precision::Double => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Precision::Single),
            2 => Some(Precision::Double),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero-sized dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!("shape {shape:?} needs {numel} elements, got {}", data.len()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Builds a tensor whose shape is known to match; panics otherwise.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape, (0..n).map(&mut f).collect())
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| lit(x)).collect())
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, low: f64, high: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| lit(rng.random_range(low..high)))
    }

    pub fn normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("finite, non-negative std");
        Tensor::from_fn(shape, |_| lit(dist.sample(rng)))
    }

    pub fn standard_normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            lit(z)
        })
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }
}

/// Output shape of a bias-style broadcast: `small` must equal `big` or be
/// a trailing suffix of it.
pub(crate) fn broadcast_shape(big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if big == small {
        return Ok(big.to_vec());
    }
    if small.len() < big.len() && big.ends_with(small) {
        return Ok(big.to_vec());
    }
    Err(dim_err!(
        "shapes {big:?} and {small:?} are not broadcast-compatible (trailing expansion only)"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[2, 5, 3], &[5, 3]).unwrap(), vec![2, 5, 3]);
        assert!(broadcast_shape(&[4, 3], &[4]).is_err());
        assert!(broadcast_shape(&[3], &[4, 3]).is_err());
    }

    #[test]
    fn le_bytes_roundtrip_is_bitwise() {
        let v = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7];
        assert_eq!(f32::from_le_slice(&f32::to_le_vec(&v)), v);
        let w = vec![std::f64::consts::PI, -1e300];
        assert_eq!(f64::from_le_slice(&f64::to_le_vec(&w)), w);
    }
}
