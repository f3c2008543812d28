//! Dense tensors, reverse-mode differentiation, optimisation and the
//! verification helpers every other module builds on.

pub mod blob;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, rel_err, Coverage, GradCheckReport};
pub use graph::{AttentionSpec, Grads, Graph, Unary, Var};
pub use optim::{Adam, OptimizerState};
pub use rng::SeedStream;
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Untracked softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.softmax(v, axis)?;
    Ok(g.value(y).clone())
}

/// Untracked elementwise map.
pub fn elementwise<T: Scalar>(kind: Unary, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.unary(v, kind)?;
    Ok(g.value(y).clone())
}

/// `KL(softmax(p) || softmax(q))`, averaged over rows for matrices.
pub fn kl_divergence<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(p_logits);
    let q = g.constant(q_logits);
    let k = g.kl_rows(p, q)?;
    Ok(g.value(k).item())
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits);
    let c = g.cross_entropy(l, targets)?;
    Ok(g.value(c).item())
}
