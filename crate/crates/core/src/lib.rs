//! Sequential recommendation with diffusion-generated contrastive views.
//!
//! A Transformer next-item recommender is trained jointly with a
//! context-aware diffusion model over the shared item-embedding space.
//! The diffusion model in-fills selected positions of a user sequence
//! conditioned on the surrounding items; the in-filled copies serve as
//! positive views for an in-batch InfoNCE objective. The three losses
//! (recommendation, contrastive, diffusion) are optimized end to end by
//! a single Adam loop over shared parameters.
//!
//! Crate layout:
//! - [`tensor`] / [`graph`]: a small dense-matrix type and the reverse-mode
//!   tape every loss is differentiated through, generic over the scalar type.
//! - [`corpus`]: ingestion, 5-core filtering, leave-one-out splits, padded
//!   batches, and the synthetic Markov corpus generator used by the tests.
//! - [`embed`], [`sr_encoder`], [`diffusion`], [`augment`], [`contrastive`]:
//!   the model itself.
//! - [`trainer`]: the joint objective, Adam, early stopping, checkpoints.
//! - [`eval`]: full-catalog ranking metrics, length groups, dispersion.
//! - [`gradcheck`]: central-difference verification of every parameter block.
//!
//! All randomness flows through [`rng::SeedStream`]; there is no global RNG.

pub mod augment;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod scalar;
pub mod sr_encoder;
pub mod tensor;
pub mod trainer;

pub use error::{CadirecError, Result};
pub use scalar::Scalar;

/// Scalar type used by training and the CLI. Gradient checks run in `f64`
/// regardless (see [`gradcheck`]).
pub type Real = f32;

/// Matrix of the default training scalar.
pub type RealTensor = tensor::Tensor<Real>;
