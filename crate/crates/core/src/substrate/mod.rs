//! Numerical substrate: tensors, seeded randomness, a reverse-mode tape and the
//! gradient checker that verifies it.
//!
//! Differentiable operations provided by [`Var`]: matrix multiply, elementwise
//! add/sub/mul, `exp`/`ln`, softmax and log-softmax, layer normalization,
//! embedding lookup and general gather, mean over an axis, row L2 normalization,
//! `max(0, ·)`, GELU, power, grouped log-sum-exp, segment means and packed
//! multi-head attention.

mod gradcheck;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, rel_error, GradCheckReport};
pub use real::{DType, Real};
pub use rng::{mix_stream, Rng, RngState};
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;

/// Names of the differentiable operations the tape supports.
pub fn required_op_set() -> &'static [&'static str] {
    &[
        "matmul",
        "add",
        "mul",
        "exp",
        "log",
        "softmax",
        "layer_norm",
        "embedding_lookup",
        "gather",
        "mean_axis",
        "l2_normalize",
        "relu",
    ]
}
