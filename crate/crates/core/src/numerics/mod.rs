//! Deterministic matrix kernels, smoothed extrema and reverse-mode
//! differentiation. Everything here runs sequentially in index order, so
//! results are bitwise reproducible.

mod autodiff;
mod gradcheck;
mod tensor;

pub use autodiff::{Gradients, Graph, NodeId};
pub use gradcheck::{finite_diff_check, numeric_gradient, DEFAULT_EPS};
pub use tensor::{
    dot, l2_normalize, l2_normalize_rows, logsumexp, norm, sigmoid, similarity_matrix, softplus, SoftSign,
    Tensor2, NORM_EPS,
};
pub(crate) use tensor::{logsumexp_unchecked, soft_weights};
