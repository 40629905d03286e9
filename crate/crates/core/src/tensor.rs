//! Dense 4-D tensors in `(batch, channels, rows, cols)` order.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tensor dimensions. Every dimension is at least 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::pre(
                "shape",
                format!("all dimensions must be >= 1, got {n}x{c}x{h}x{w}"),
            ));
        }
        Ok(Self { n, c, h, w })
    }

    /// The 1x1x1x1 shape of losses and other scalars.
    pub const SCALAR: Shape = Shape {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample (`c * h * w`).
    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major 4-D array of scalars.
///
/// Tensors are plain values. Gradient slots and the requires-grad flag live on
/// the recording [`Tape`](crate::Tape) node that holds the tensor, so a tensor
/// that has been recorded can never be mutated behind the graph's back.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::pre(
                "tensor",
                format!("{} values do not fill shape {shape}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::SCALAR, v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// Single value of a 1x1x1x1 tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape != Shape::SCALAR {
            return Err(Error::NotScalar(self.shape));
        }
        Ok(self.data[0])
    }

    /// Contiguous `(c, h, w)` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.sample();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    /// Inner product accumulated sequentially in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc + a.as_f64() * b.as_f64()))
    }

    /// Sum of all elements, accumulated sequentially in row-major order in `f64`.
    pub fn sum_f64(&self) -> f64 {
        sum_f64(&self.data)
    }

    /// Stacks equally shaped tensors along the batch dimension.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::pre("stack", "nothing to stack"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape,
                    right: p.shape,
                });
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Self::new(Shape { n, ..first.shape }, data)
    }

    /// Splits along the batch dimension into single-sample tensors.
    pub fn unstack(&self) -> Vec<Self> {
        (0..self.shape.n)
            .map(|n| Self {
                shape: Shape { n: 1, ..self.shape },
                data: self.sample(n).to_vec(),
            })
            .collect()
    }
}

/// Sequential row-major summation in `f64`; the one reduction order used
/// everywhere so results are reproducible bit-for-bit.
#[inline]
pub(crate) fn sum_f64<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().fold(0.0, |acc, v| acc + v.as_f64())
}
