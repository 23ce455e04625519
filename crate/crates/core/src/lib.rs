//! Bayesian online deep probit models for click-through-rate prediction.
//!
//! Every weight carries a Gaussian belief. Training is a single assumed
//! density filtering pass over the stream: each example propagates means
//! and variances forward, and the gradients of the log evidence with
//! respect to each weight's moments give its new posterior.

pub mod checkpoint;
pub mod data;
pub mod gaussian;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod parallel;

pub use data::{Feature, Label, SparseInstance};
pub use gaussian::{AdfGradient, Gaussian, NaturalGaussian, VarianceBounds};
pub use layers::{EmbeddingOp, WeightId};
pub use model::{calibrate, Model, ModelConfig, ModelError};
