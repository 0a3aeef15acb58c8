//! Sheaf neural diffusion for top-K recommendation.
//!
//! Users and items share one graph. Each node holds a small vector space,
//! each edge a pair of learned restriction maps, and embeddings are diffused
//! with the normalized sheaf Laplacian before inner-product scoring.
//!
//! - [`sheaf`]: cellular sheaves, coboundary and Laplacians.
//! - [`graph`]: rating files, the interaction graph and per-user splits.
//! - [`model`]: the diffusion layers, scoring and checkpoints.
//! - [`autodiff`]: the reverse-mode tape used for training.
//! - [`training`]: losses, triplet sampling and the optimizer loop.
//! - [`eval`]: ranking metrics and latency measurement.
//! - [`experiment`]: end-to-end runs, sweeps and synthetic data.

pub mod activation;
pub mod linalg;
pub mod sheaf;
pub mod graph;
pub mod autodiff;
pub mod model;
pub mod eval;
pub mod training;
pub mod experiment;
