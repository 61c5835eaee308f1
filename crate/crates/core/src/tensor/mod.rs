//! Dense NCHW tensors, the kernels the networks need, and a small reverse-mode tape.

pub mod gradcheck;
mod graph;
mod ops;

pub use graph::{Gradients, Graph, NodeId};
pub(crate) use ops::channel_layout;
pub use ops::{
    channel_moments, channel_moments_f64, conv2d, conv2d_backward, global_avg_pool, matmul, max_pool2d, relu, sigmoid,
    softmax_rows, upsample_bilinear, ChannelMoments,
};

use crate::error::{Error, Result};

/// Row-major dense array of `f32`.
///
/// Image batches are laid out as `[N, C, H, W]`; feature matrices as `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape { shape: shape.to_vec(), reason: "rank must be at least 1".into() });
    }
    if shape.contains(&0) {
        return Err(Error::Shape { shape: shape.to_vec(), reason: "all extents must be >= 1".into() });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::Shape { reason: format!("expects {len} elements, got {}", data.len()), shape });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let len = check_shape(&shape).expect("invalid tensor shape");
        Tensor { shape, data: vec![value; len] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let len = check_shape(&shape).expect("invalid tensor shape");
        Tensor { shape, data: (0..len).map(&mut f).collect() }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("vector must be non-empty")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
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

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Dimension { op, lhs: self.shape.clone(), rhs: vec![0, 0] }),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Dimension { op, lhs: self.shape.clone(), rhs: vec![0, 0, 0, 0] }),
        }
    }

    /// Extent of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn sample_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_shape(self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Gathers samples along the batch axis.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::contract("cannot select an empty batch"));
        }
        let n = self.batch();
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            if i >= n {
                return Err(Error::contract(format!("sample index {i} out of range for batch of {n}")));
            }
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(&idx)
    }

    /// Concatenates along the batch axis; trailing extents must agree.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Dimension { op: "concat", lhs: first.shape.clone(), rhs: p.shape.clone() });
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Largest absolute elementwise difference; infinite if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
