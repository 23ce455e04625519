//! Reference computations for testing `bodl`.
//!
//! Nothing here reuses the moment formulas of the main crate: layer
//! moments come from sampling the plain layer functions, posteriors from
//! numerical integration, and gradients from finite differences of the
//! forward pass.

pub mod fd;
pub mod mc;
pub mod quadrature;
pub mod synth;

pub use fd::{finite_diff_gradients, FdError};
pub use mc::{mc_layer_moments, LayerSpec, McEstimate};
pub use quadrature::{quadrature_probit_posterior, QuadraturePosterior};
pub use synth::{SyntheticConfig, SyntheticStream};
