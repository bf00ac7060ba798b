//! Dense row-major tensors and the forward numerical kernels.
//!
//! Every kernel accumulates in `f64` and narrows the result to the tensor's
//! element type once per output element, so results do not depend on loop
//! order inside a single output.

mod geometry;
pub mod grad;
mod ops;

use std::fmt::{Debug, Display};

use num_traits::Float;
use thiserror::Error;

pub use geometry::ConvGeometry;
pub use ops::{
    conv2d, fc_forward, global_avg_pool, maxpool2d, pointwise_conv1d, relu, softmax_cross_entropy,
    CrossEntropy, MaxPoolOutput, Reduction,
};

/// Element type of a [`Tensor`].
///
/// `f32` is the storage type used for training and deployment; `f64` is used
/// when gradients are verified numerically.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Short type name used in debug output.
    const NAME: &'static str;

    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: invalid geometry: {reason}")]
    Geometry { op: &'static str, reason: String },
    #[error("{op}: {reason}")]
    Input { op: &'static str, reason: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense row-major N-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::NAME, self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
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

    /// Mutable access to the payload. The shape can not change through this.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &dim)| {
                debug_assert!(i < dim);
                acc * dim + i
            })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Converts every element through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::narrow(x.widen())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Debug-build check that every value is finite.
    #[track_caller]
    pub fn debug_assert_finite(&self) {
        debug_assert!(self.is_finite(), "non-finite value in {self:?}");
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.widen()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.widen().abs())
            .fold(0.0, f64::max)
    }

    /// `self + alpha * other`, elementwise.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.expect_same_shape("axpy", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| T::narrow(a.widen() + alpha * b.widen()))
                .collect(),
        })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|x| T::narrow(alpha * x.widen()))
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Input {
                op,
                reason: format!("shape {:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Copies channels `[start, end)` of a `[b, c, ...]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() < 2 || start > end || end > self.shape[1] {
            return Err(TensorError::Input {
                op: "slice_channels",
                reason: format!("range {start}..{end} on shape {:?}", self.shape),
            });
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(b * (end - start) * inner);
        for bi in 0..b {
            let base = bi * c * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = end - start;
        Self::new(shape, data)
    }

    /// Concatenates `[b, c_i, ...]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Input {
            op: "concat_channels",
            reason: "no tensors".into(),
        })?;
        let b = first.shape[0];
        let tail = &first.shape[2..];
        let inner: usize = tail.iter().product();
        let mut channels = 0;
        for p in parts {
            if p.rank() != first.rank() || p.shape[0] != b || &p.shape[2..] != tail {
                return Err(TensorError::Input {
                    op: "concat_channels",
                    reason: format!("shape {:?} vs {:?}", p.shape, first.shape),
                });
            }
            channels += p.shape[1];
        }
        let mut data = Vec::with_capacity(b * channels * inner);
        for bi in 0..b {
            for p in parts {
                let len = p.shape[1] * inner;
                data.extend_from_slice(&p.data[bi * len..(bi + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = channels;
        Self::new(shape, data)
    }
}

/// `max |a - b| / (max |b| + 1e-8)`; NaN anywhere yields infinity.
pub fn max_relative_deviation<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x.widen() - y.widen()).abs();
        if d.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(d);
    }
    let scale = b.max_abs();
    if !scale.is_finite() {
        return f64::INFINITY;
    }
    worst / (scale + 1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 5, .. }));
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.offset(&[0, 1, 0]), 4);
    }

    #[test]
    fn channel_slice_and_concat_invert() {
        let t = Tensor::<f32>::from_fn(&[2, 5, 3], |i| i as f32);
        let a = t.slice_channels(0, 2).unwrap();
        let b = t.slice_channels(2, 5).unwrap();
        assert_eq!(Tensor::concat_channels(&[a, b]).unwrap(), t);
    }

    #[test]
    fn deviation_flags_nan() {
        let a = Tensor::new(vec![2], vec![1.0f32, f32::NAN]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0f32, 1.0]).unwrap();
        assert!(max_relative_deviation(&a, &b).is_infinite());
        assert_eq!(max_relative_deviation(&b, &b), 0.0);
    }
}
