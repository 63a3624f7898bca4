//! Dense-matrix primitives, stable reductions, random streams and a
//! finite-difference gradient oracle.

mod cloud;
mod diff;
pub mod io;
mod matrix;
mod rng;

pub use cloud::ParticleCloud;
pub use diff::finite_diff_gradient;
pub use matrix::{dot, logsumexp, logsumexp_cols, logsumexp_rows, DenseMatrix};
pub use rng::{gaussian_sample, SeededRng};
