//! Dense 4-D `f64` arrays in `(batch, channel, height, width)` order.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dimensions `(batch, channel, height, width)`.
pub type Dims = [usize; 4];

/// Row-major dense tensor with four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor4::new", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// 2-D matrix stored as `(rows, cols, 1, 1)`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([rows, cols, 1, 1], data)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: Dims, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { dims, data }
    }

    pub fn normal<R: Rng + ?Sized>(dims: Dims, std: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(b, c, y, x);
        self.data[o] = v;
    }

    /// Same data, new dims with identical element count.
    pub fn reshape(&self, dims: Dims) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, &dims));
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
        })
    }

    /// Copy of batch item `b` as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, b: usize) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Concatenate tensors along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape("stack", &first.dims, &t.dims));
            }
            batch += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            dims: [batch, c, h, w],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn same_dims(&self, other: &Tensor4, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor4) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
