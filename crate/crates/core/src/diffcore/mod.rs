//! Dense linear algebra and fixed-architecture differentiable operations.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod ops;

pub use matrix::{dot, norm, Matrix};
pub use mlp::{sgd_step, sigmoid, Activation, Backward, Dense, GradBundle, Mlp, Trace};
pub use ops::{
    bce, cosine, cosine_with_grad, entropy, grad_reverse, softmax, softmax_rows, softmax_xent,
    zero_norm_cosine_count, PROB_EPS,
};
