//! Conjugate-smoothing regularized diffusion for decentralized stochastic
//! multi-agent optimization.

// Validation writes `!(x > 0.0)` so that NaN is rejected along with the
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod metrics;
pub mod risks;
pub mod smoothing;
pub mod solvers;
pub mod topology;
pub mod experiment;
