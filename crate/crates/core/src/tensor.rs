//! Dense row-major arrays (`f32` by default) with up to four dimensions.
//!
//! Image batches use `(batch, channel, height, width)` order, fully connected
//! activations use `(batch, features)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum supported rank.
pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be between 1 and {MAX_RANK}, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("element count overflows for {dims:?}")))
}

impl<T: Scalar> Tensor<T> {
    /// A tensor of the given shape with every element set to `fill`.
    pub fn new(dims: &[usize], fill: T) -> Result<Self> {
        let len = check_dims(dims)?;
        if !fill.is_finite() {
            return Err(Error::invalid("fill value must be finite"));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, T::zero())
    }

    /// Wraps existing data. The data must be finite and match the shape.
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "shape {dims:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite element at index {pos}")));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Internal constructor for results whose shape is already known to be valid.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Collapses every dimension into one, keeping element order.
    pub fn flatten(self) -> Tensor<T> {
        let n = self.data.len();
        Tensor {
            dims: vec![n],
            data: self.data,
        }
    }

    /// Keeps the leading (batch) dimension and collapses the rest.
    pub fn flatten_batch(self) -> Tensor<T> {
        if self.dims.len() <= 1 {
            return self;
        }
        let n = self.dims[0];
        let rest = self.data.len() / n;
        Tensor {
            dims: vec![n, rest],
            data: self.data,
        }
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Tensor<T>> {
        let len = check_dims(dims)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    /// Copies batch item `index` out of a tensor whose first axis is the batch.
    pub fn batch_item(&self, index: usize) -> Result<Tensor<T>> {
        let n = self.dims[0];
        if index >= n {
            return Err(Error::shape(format!("batch index {index} out of {n}")));
        }
        let stride = self.data.len() / n;
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Ok(Tensor {
            dims,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        if first.rank() >= MAX_RANK {
            return Err(Error::shape("stacked tensor would exceed rank 4"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.dims, t.dims
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = Vec::with_capacity(first.rank() + 1);
        dims.push(items.len());
        dims.extend_from_slice(&first.dims);
        Ok(Tensor { dims, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, treating `0.0` and `-0.0` as different.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn expect_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::shape(format!(
                "{what}: expected {dims:?}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Returns `(n, c, h, w)` or an error naming `what`.
    pub(crate) fn nchw(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "{what}: expected a 4-D tensor, got {:?}",
                self.dims
            ))),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.dims)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}
