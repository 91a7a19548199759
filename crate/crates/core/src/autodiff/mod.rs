//! Minimal reverse-mode automatic differentiation over dense real tensors.
//!
//! Every primitive the generator, renderer, adapters and discriminator
//! need lives here as a graph op with a hand-written adjoint. Expensive
//! primitives (bilinear lookup, convolution, compositing) are fused so the
//! tape stays short.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{AutodiffError, Gradients, Graph, Var};
pub(crate) use graph::softplus;
pub use params::{sgd_step, Adam, Binding, ParamId, ParamStore};
pub use tensor::{numel, Precision, Tensor};

/// Scaled dot-product attention `softmax(q·kᵀ·scale)·v`.
///
/// `q: [Nq, D]`, `k: [Nk, D]`, `v: [Nk, Dv]`. Tensors are never empty,
/// so an empty key set is rejected where keys are assembled from lists.
pub fn attention(g: &Graph, q: Var, k: Var, v: Var, scale: f64) -> Var {
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.mul_scalar(logits, scale);
    let w = g.softmax(logits);
    g.matmul(w, v)
}

/// `x·W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(g: &Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add(y, b)
}
