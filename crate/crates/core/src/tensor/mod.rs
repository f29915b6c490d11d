//! Dense `f64` tensors, the forward/backward kernels every layer is built
//! from, and a reverse-mode tape that records them.
//!
//! Feature maps are laid out `[batch, channels, height, width]`; parameters
//! use whatever shape their kernel expects (`[out, in, kh, kw]` for conv
//! weights, `[out, in]` for linear weights, `[c]` for norm scales).

mod gemm;
pub mod ops;
mod tape;

pub use ops::{BnCache, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use tape::{BnMode, OpKind, OpRecord, Tape, Var};

use crate::error::{input_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and that
    /// every dimension is positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(input_err(format!("invalid tensor shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(input_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "invalid shape {shape:?}");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
    }

    /// Fills a tensor by calling `f` with each flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "invalid shape {shape:?}");
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(f).collect(), grad: None }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Gradient populated by [`Tape::backward`], if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Interprets the tensor as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(input_err(format!("expected a 4-d tensor, got shape {:?}", self.shape))),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(input_err(format!("expected a 2-d tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(input_err(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Gathers the listed samples (first dimension) into a new tensor.
    pub fn select_batch(&self, rows: &[usize]) -> Result<Self> {
        let stride = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(input_err(format!("row {r} out of range for batch {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    /// Splits a `[B, C, H, W]` tensor into consecutive channel groups.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let [b, c, h, w] = self.dims4()?;
        if sizes.iter().sum::<usize>() != c {
            return Err(input_err(format!("channel split {sizes:?} does not sum to {c}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &ci in sizes {
            let mut data = Vec::with_capacity(b * ci * plane);
            for n in 0..b {
                let start = (n * c + offset) * plane;
                data.extend_from_slice(&self.data[start..start + ci * plane]);
            }
            out.push(Tensor::new(vec![b, ci, h, w], data)?);
            offset += ci;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Row-wise argmax of a `[B, C]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let [b, c] = self.dims2()?;
        Ok((0..b)
            .map(|r| {
                let row = &self.data[r * c..(r + 1) * c];
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}
