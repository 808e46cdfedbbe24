//! Dense f64 linear algebra, stable softmax helpers, the seeded PRNG and the
//! finite-difference gradient oracle.

mod fd;
mod matrix;
mod rng;
mod softmax;

pub use fd::{finite_diff_grad, max_rel_err, rel_err, DEFAULT_FD_STEP};
pub use matrix::Matrix;
pub use rng::Rng;
pub use softmax::{log_add_exp, log_softmax_row, log_sum_exp, stable_softmax_row};
pub(crate) use matrix::dot;
