//! Execution backends shared by every model.
//!
//! Model code is written once against [`Backend`]. [`Eval`] runs it on plain
//! tensors and frees intermediates as it goes; [`GradTape`](crate::GradTape)
//! records the same computation for reverse-mode differentiation.

use crate::attention::{kernel, ChannelPlan};
use crate::error::{Error, Result};
use crate::ops::{self, Broadcast};
use crate::tensor::Tensor;

pub trait Backend {
    type Value: Clone;

    fn constant(&self, t: Tensor) -> Self::Value;
    fn value(&self, v: &Self::Value) -> Tensor;

    fn shape(&self, v: &Self::Value) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&self, a: &Self::Value, factor: f64) -> Self::Value;
    fn add_bcast(&self, x: &Self::Value, y: &Self::Value, mode: Broadcast) -> Result<Self::Value>;
    fn mul_bcast(&self, x: &Self::Value, y: &Self::Value, mode: Broadcast) -> Result<Self::Value>;
    fn sigmoid(&self, x: &Self::Value) -> Self::Value;
    fn gelu(&self, x: &Self::Value) -> Self::Value;
    /// Normalisation over the last axis, without affine parameters.
    fn layer_norm(&self, x: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn conv3d(
        &self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
    ) -> Result<Self::Value>;
    fn avg_pool2(&self, x: &Self::Value) -> Result<Self::Value>;
    fn mean_axis(&self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn reshape(&self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn permute(&self, x: &Self::Value, axes: &[usize]) -> Result<Self::Value>;
    fn concat0(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn repeat0(&self, x: &Self::Value, times: usize) -> Result<Self::Value>;
    fn temporal_shift(&self, x: &Self::Value) -> Result<Self::Value>;
    /// Space-time mixing attention on `[H×T×S×d_h]` queries, keys and values.
    fn stm_attention(
        &self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        plan: &ChannelPlan,
    ) -> Result<Self::Value>;
    /// Softmax cross-entropy of a logit vector; yields a scalar.
    fn cross_entropy(&self, logits: &Self::Value, target: usize) -> Result<Self::Value>;
    fn sum(&self, x: &Self::Value) -> Self::Value;

    /// `x · w + b` for `x: [n×d_in]`, `w: [d_in×d_out]`, `b: [d_out]`.
    fn linear(&self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        let y = self.matmul(x, w)?;
        self.add_bcast(&y, b, Broadcast::Suffix)
    }
}

/// Plain forward evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Backend for Eval {
    type Value = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }

    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::matmul(a, b)
    }

    fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        a.zip_map(b, |x, y| x + y)
    }

    fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        a.zip_map(b, |x, y| x - y)
    }

    fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        a.zip_map(b, |x, y| x * y)
    }

    fn scale(&self, a: &Tensor, factor: f64) -> Tensor {
        a.map(|x| x * factor)
    }

    fn add_bcast(&self, x: &Tensor, y: &Tensor, mode: Broadcast) -> Result<Tensor> {
        ops::broadcast_zip(x, y, mode, |a, b| a + b)
    }

    fn mul_bcast(&self, x: &Tensor, y: &Tensor, mode: Broadcast) -> Result<Tensor> {
        ops::broadcast_zip(x, y, mode, |a, b| a * b)
    }

    fn sigmoid(&self, x: &Tensor) -> Tensor {
        x.map(ops::sigmoid)
    }

    fn gelu(&self, x: &Tensor) -> Tensor {
        x.map(ops::gelu)
    }

    fn layer_norm(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        ops::layer_norm(x, eps)
    }

    fn conv3d(&self, x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        ops::conv3d(x, kernel, bias)
    }

    fn avg_pool2(&self, x: &Tensor) -> Result<Tensor> {
        ops::avg_pool2(x)
    }

    fn mean_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        ops::mean_axis(x, axis)
    }

    fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        x.reshape(shape.to_vec())
    }

    fn permute(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        ops::permute(x, axes)
    }

    fn concat0(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::concat0(a, b)
    }

    fn repeat0(&self, x: &Tensor, times: usize) -> Result<Tensor> {
        ops::repeat0(x, times)
    }

    fn temporal_shift(&self, x: &Tensor) -> Result<Tensor> {
        ops::temporal_shift(x)
    }

    fn stm_attention(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        plan: &ChannelPlan,
    ) -> Result<Tensor> {
        Ok(kernel::stm_forward(q, k, v, plan)?.0)
    }

    fn cross_entropy(&self, logits: &Tensor, target: usize) -> Result<Tensor> {
        Ok(Tensor::scalar(ops::cross_entropy(logits, target)?.0))
    }

    fn sum(&self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum())
    }
}
