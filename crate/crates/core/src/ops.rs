//! Tensor-level entry points to the kernels for callers that do not record a tape.

use crate::autograd::AutogradError;
use crate::kernels::{self, AttnDims};
use crate::tensor::{Scalar, Tensor, TensorError};

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| kernels::gelu(x.data()[i]))
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let cols = x.cols();
    if gamma.len() != cols || beta.len() != cols {
        return Err(TensorError::Mismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let (y, _, _) = kernels::layer_norm(x.data(), gamma.data(), beta.data(), cols, T::from_f64(eps));
    Tensor::new(x.shape().to_vec(), y)
}

/// Single-head attention over `q[n,d]`, `k[m,d]`, `v[m,d]`.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal_mask: bool,
) -> Result<Tensor<T>, TensorError> {
    multi_head_attention(q, k, v, 1, causal_mask).map(|(out, _)| out)
}

/// Returns the output and the attention weights `[heads, n, m]`.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    causal: bool,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    for t in [q, k, v] {
        if t.shape().len() != 2 {
            return Err(TensorError::Rank { op: "attention", expected: 2, shape: t.shape().to_vec() });
        }
    }
    let (n, d, m) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    if k.shape()[1] != d || v.shape() != k.shape() || heads == 0 || d % heads != 0 || (causal && n != m) {
        return Err(TensorError::Mismatch { op: "attention", lhs: q.shape().to_vec(), rhs: k.shape().to_vec() });
    }
    let (out, probs) = kernels::attention(q.data(), k.data(), v.data(), AttnDims { n, m, d, heads, causal });
    Ok((Tensor::new(vec![n, d], out)?, Tensor::new(vec![heads, n, m], probs)?))
}

pub fn masked_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    loss_mask: &[bool],
) -> Result<T, AutogradError> {
    let n = logits.rows();
    if targets.len() != n || loss_mask.len() != n {
        return Err(TensorError::Mismatch {
            op: "masked_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), loss_mask.len()],
        }
        .into());
    }
    let vocab = logits.cols();
    if let Some((&id, _)) = targets.iter().zip(loss_mask).find(|(&t, &m)| m && t >= vocab) {
        return Err(AutogradError::TargetOutOfRange { id, vocab });
    }
    let (loss, _, count) = kernels::masked_cross_entropy(logits.data(), vocab, targets, loss_mask);
    if count == 0 {
        return Err(AutogradError::EmptyLoss);
    }
    Ok(loss)
}
