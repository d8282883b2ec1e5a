//! Dense row-major tensors and boolean pixel masks.
//!
//! A tensor is an immutable value: shape plus a shared flat buffer. Clones are
//! cheap (the buffer is reference counted) and mutation goes through
//! [`TensorBase::data_mut`], which copies on write only when the buffer is
//! shared. Shapes follow the `[channels, height, width]` convention for maps,
//! `[n]` for vectors and `[]` for scalars.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> TensorBase<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Shape {
                op: "tensor_new",
                details: format!("shape {:?} wants {} elements, got {}", shape, want, data.len()),
            });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: Arc::new(vec![S::zero(); len]) }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let len = shape.iter().product();
        Self { shape, data: Arc::new(vec![value; len]) }
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: Vec::new(), data: Arc::new(vec![value]) }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Copy-on-write mutable access.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single element of a scalar (or any length-1) tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Shape {
                op: "tensor_item",
                details: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_scalar_shape(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().product::<usize>() == 1
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape with an equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(Error::Shape {
                op: "tensor_reshape",
                details: format!("cannot view {} elements as {:?}", self.data.len(), shape),
            });
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    /// Interpret the shape as a channel map `[c, h, w]`; `[h, w]` is read as a
    /// single channel.
    pub fn as_chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            [h, w] => Ok((1, *h, *w)),
            other => Err(Error::Shape {
                op: "tensor_as_chw",
                details: format!("expected a 2- or 3-axis map, got {:?}", other),
            }),
        }
    }
}

// ---- masks ----

/// Boolean pixel mask over an `h x w` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    flags: Vec<bool>,
    count: usize,
}

impl Mask {
    pub fn new(height: usize, width: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != height * width {
            return Err(Error::Shape {
                op: "mask_new",
                details: format!("{}x{} mask wants {} flags, got {}", height, width, height * width, flags.len()),
            });
        }
        let count = flags.iter().filter(|f| **f).count();
        Ok(Self { height, width, flags, count })
    }

    pub fn all(height: usize, width: usize) -> Self {
        Self { height, width, flags: vec![true; height * width], count: height * width }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, idx: usize) -> bool {
        self.flags[idx]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Indices of set pixels in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i)
    }
}
