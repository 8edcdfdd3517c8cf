//! Peer-effect estimation on networks with unobserved confounding.
//!
//! The crate covers graph aggregation and the `(I − G)` transform, a
//! structural simulator, linear IV baselines, a small neural-network engine,
//! the two-stage residual-inclusion estimator with an adversarial
//! discriminator, and a benchmarking harness.

pub mod baselines;
pub mod dig2rsi;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod nn;
pub mod result;
pub mod sim;

pub use error::{Error, Result};
pub use exec::Execution;
pub use graph::SparseGraph;
pub use matrix::FeatureMatrix;
pub use result::EstimationResult;
pub use sim::{Dataset, GraphSpec, Nonlinearity, SemParams};
