//! Dense row-major tensor of f64 values.
//!
//! Shapes follow the convention `[N, C, H, W]` for image batches,
//! `[N, F]` for flat batches and `[C, H, W]` / `[F]` for single samples.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension, i.e. the batch size for batch tensors.
    pub fn dim0(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape without the leading (batch) dimension.
    pub fn inner_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// A copy of this tensor with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor { shape, data: self.data.clone() }
    }

    /// Concatenate two batches along the leading dimension.
    pub fn concat0(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!(a.inner_shape(), b.inner_shape(), "batch shapes must agree");
        let mut shape = a.shape.clone();
        shape[0] += b.dim0();
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor { shape, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack per-sample tensors (all of identical shape) into one batch tensor.
    pub fn stack(samples: &[&Tensor]) -> Tensor {
        assert!(!samples.is_empty(), "cannot stack an empty sample list");
        let inner = samples[0].shape.clone();
        let n = samples.len();
        let mut data = Vec::with_capacity(n * samples[0].numel());
        for s in samples {
            debug_assert_eq!(s.shape, inner);
            data.extend_from_slice(&s.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&inner);
        Tensor { shape, data }
    }

    /// Split a batch tensor into per-sample tensors.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n = self.dim0();
        let inner: Vec<usize> = self.inner_shape().to_vec();
        let stride: usize = inner.iter().product();
        (0..n)
            .map(|i| Tensor::new(inner.clone(), self.data[i * stride..(i + 1) * stride].to_vec()))
            .collect()
    }
}
