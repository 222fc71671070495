//! Set-to-set distance learning with class-specific collaborative
//! representation.
//!
//! * [`numkernel`]: dense matrices, Cholesky, exact KKT reference solver.
//! * [`features`]: frame encoder, non-local attention, pooling, embedding.
//! * [`cscr`]: the ADMM pair solver and set distance.
//! * [`training`]: contrastive loss, its gradient, and bi-level training.
//! * [`harness`]: datasets, synthetic data, classification and verification.
//! * [`checks`]: self-verification suites (oracles, gradients, invariants).

pub mod checks;
pub mod cscr;
pub mod error;
pub mod features;
pub mod harness;
pub mod numkernel;
pub mod par;
pub mod training;

pub use cscr::{solve_pair, CscrSolution, Hyperparams, PairLabel};
pub use error::{Error, Result};
pub use features::{Model, ModelConfig};
pub use numkernel::Matrix;
pub use par::Exec;
