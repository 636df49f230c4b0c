//! Dense tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, max_relative_error, numerical_gradient, FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{l2_normalize_rows, log_sum_exp, row_norms, softmax_lastdim, Tensor};
