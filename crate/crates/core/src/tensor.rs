//! Dense rank-4 tensors in `[batch, channel, height, width]` layout.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type of a tensor.
///
/// Training runs in `f32`. `f64` instantiations exist so gradients can be
/// verified by finite differences without single-precision rounding noise.
pub trait Real: Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Dims {
    fn from(d: [usize; 4]) -> Self {
        Dims::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T: Real = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: impl Into<Dims>) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: impl Into<Dims>, value: T) -> Self {
        let dims = dims.into();
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: impl Into<Dims>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if data.len() != dims.len() {
            return Err(Error::ShapeMsg(format!(
                "{} elements cannot fill a tensor of dims {}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(
        dims: impl Into<Dims>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let dims = dims.into();
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    /// A `1×1×1×1` tensor.
    pub fn scalar(v: T) -> Self {
        Tensor4 {
            dims: Dims::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims == Dims::new(1, 1, 1, 1)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.dims.n && c < self.dims.c && y < self.dims.h && x < self.dims.w);
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `h×w` plane of one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.dims.c {
            return Err(Error::ShapeMsg(format!(
                "channel range {start}..{end} out of bounds for {}",
                self.dims
            )));
        }
        let dims = Dims::new(self.dims.n, end - start, self.dims.h, self.dims.w);
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..self.dims.n {
            for c in start..end {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor4 { dims, data })
    }

    /// Batch items `[start, end)` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.dims.n {
            return Err(Error::ShapeMsg(format!(
                "batch range {start}..{end} out of bounds for {}",
                self.dims
            )));
        }
        let item = self.dims.c * self.dims.plane();
        let dims = Dims::new(end - start, self.dims.c, self.dims.h, self.dims.w);
        Ok(Tensor4 {
            dims,
            data: self.data[start * item..end * item].to_vec(),
        })
    }

    /// Stacks tensors of identical `[1, c, h, w]`-compatible item shape along the batch axis.
    pub fn stack_batch(items: &[Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMsg("cannot stack an empty list".into()))?;
        let d = first.dims;
        let mut data = Vec::with_capacity(d.len() * items.len());
        let mut n = 0;
        for t in items {
            let td = t.dims;
            if (td.c, td.h, td.w) != (d.c, d.h, d.w) {
                return Err(Error::shape("stack_batch", d, td));
            }
            n += td.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            dims: Dims::new(n, d.c, d.h, d.w),
            data,
        })
    }
}
