//! Small dense linear algebra and a damped Newton maximizer.

mod matrix;
mod newton;

pub use matrix::{dot, norm2, norm_inf, solve_general, solve_spd, Cholesky, Matrix};
pub use newton::{maximize_concave, ConcaveObjective, NewtonOptions, NewtonReport};
