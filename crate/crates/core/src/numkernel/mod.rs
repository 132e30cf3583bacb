//! Dense matrices, a reverse-mode tape over them, and a finite-difference
//! gradient oracle.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, max_relative_error, numeric_gradient};
pub use matrix::{argmax, cosine_sim, Matrix, PROB_FLOOR};
pub use tape::{Gradients, Tape, Var};
