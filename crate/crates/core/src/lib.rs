//! Doubly stochastic (Sinkhorn-normalized) attention.
//!
//! - [`numerics`]: dense matrices, stable reductions, seeded random streams.
//! - [`sinkhorn`]: log-domain Sinkhorn scaling, SoftMax, soft c-transform.
//! - [`attention`]: costs from query/key/value matrices and the residual layer.
//! - [`autodiff`]: reverse mode through unrolled Sinkhorn iterations.
//! - [`flows`]: particle dynamics of the attention fields and their energies.
//! - [`meanfield`]: bandwidth-rescaled fields, their limits, heat diffusion.
//! - [`training`]: toy set-classification datasets and an SGD harness.

pub mod attention;
pub mod autodiff;
mod error;
pub mod flows;
pub mod meanfield;
pub mod numerics;
pub mod sinkhorn;
pub mod training;

pub use attention::{AttentionParams, NormalizationSpec};
pub use error::{Error, Result};
pub use numerics::{DenseMatrix, ParticleCloud, SeededRng};
pub use sinkhorn::{CostMatrix, SinkhornResult, StopRule};
