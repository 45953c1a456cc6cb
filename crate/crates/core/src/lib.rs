//! Estimation of the never-jointly-observed covariance block in the
//! statistical file-matching problem.
//!
//! Dataset A observes variables `(X, Y)`, dataset B observes `(X, Z)`, and
//! `(Y, Z)` are never seen together. Under a `q`-factor model
//! `Σ = ΛΛᵀ + Ψ` the cross block `Σ_YZ = Λ_Y Λ_Zᵀ` can be recovered from the
//! two marginals. The crate provides:
//!
//! * [`em`]: maximum-likelihood factor analysis by EM, both on complete data
//!   and on the two half-observed scatter matrices,
//! * [`gram`]: constructive completion of the low-rank Gram matrix through an
//!   orthogonal Procrustes alignment,
//! * [`identifiability`]: degrees-of-freedom counts and rank conditions,
//! * [`selection`]: BIC over the number of factors,
//! * [`baselines`]: conditional independence, identified-set membership and
//!   low-rank data-matrix completion,
//! * [`simulate`]: data generation and the benchmark protocols,
//! * [`ingest`]: CSV input and model persistence.

pub mod baselines;
pub mod em;
pub mod error;
pub mod gram;
pub mod identifiability;
pub mod ingest;
pub mod linalg;
pub mod rng;
pub mod selection;
pub mod simulate;
pub mod types;

pub use error::{Error, Result};
pub use types::{FactorModel, FitReport, ObservedScatter, PartialCovariance, PartitionSpec};
