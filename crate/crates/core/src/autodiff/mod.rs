//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitive operations as they are evaluated; calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of every leaf that was marked as requiring one. Gradients only
//! flow through nodes that depend on such a leaf, so frozen parameters cost
//! nothing in the reverse pass.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, finite_difference_check_many, relative_error, FdReport, Mismatch};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_into;
pub(crate) use tensor::gemm;
