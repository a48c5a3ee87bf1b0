//! Structured-recognition variational inference toolkit.
//!
//! Amortised variational inference with recognition potentials that carry
//! joint (structured) factors, capturing the posterior dependence between
//! latents induced by "explaining away". Three model families are provided
//! on top of a shared reverse-mode differentiation substrate:
//!
//! - sparse-GP factor models with a full-covariance posterior over all
//!   inducing values (`gpfa`, built on `sparse_gp`),
//! - tree-structured discrete latent models with exact belief-propagation
//!   inference (`tree_vae`, built on `tree`),
//! - Gaussian-mixture latents with full-covariance Gaussian recognition
//!   (`gmm`),
//!
//! plus seeded synthetic data generators (`datasets`), evaluation metrics
//! and a scaling benchmark (`metrics`), and checkpoint/trace serialization
//! (`io`).

pub mod datasets;
pub mod error;
pub mod gmm;
pub mod gpfa;
pub mod io;
pub mod likelihood;
pub mod metrics;
pub mod sparse_gp;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tree;
pub mod tree_vae;

pub use error::{Error, Result};
