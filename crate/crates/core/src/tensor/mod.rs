//! Dense matrix foundation: storage, products, reductions, SVD and a
//! deterministic random stream.

mod matrix;
pub mod rng;
pub mod svd;

pub use matrix::{frobenius_mse, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{seeded_rng, RandomStream};
pub use svd::{svd, SvdFactors};
