//! Dense arrays, a reverse-mode tape, and a finite-difference gradient oracle.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::{log_softmax_row, softmax_row, Tensor};
