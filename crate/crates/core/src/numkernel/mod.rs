//! Dense matrix kernel: row-major matrices, Cholesky factorization and the
//! exact KKT reference solver for the pair problem.

mod cholesky;
mod kkt;
mod matrix;

pub use cholesky::{cholesky_factor, cholesky_solve, CholeskyFactor, PIVOT_FLOOR, SYMMETRY_TOL};
pub(crate) use kkt::check_pair_inputs;
pub use kkt::{combination_distance, kkt_qp_solve, qp_objective, QpSolution};
pub use matrix::{all_finite, axpy, dot, max_abs_diff, norm_sq, sub, sum, Matrix};
