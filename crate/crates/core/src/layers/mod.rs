//! Forward moment propagation and the matching reverse pass.
//!
//! Every activation is summarized by a mean and a variance. Layers map
//! input moments to output moments under the usual independence
//! assumptions; [`backward`] differentiates that arithmetic to produce
//! `d log Z / d(mean, variance)` for every weight that took part.

mod dense;
mod embedding;
mod network;
mod ops;
mod probit;
mod relu;

#[cfg(any(test, feature = "op-count"))]
pub mod op_count;

pub use dense::{dense_forward, DenseLayerWeights};
pub use embedding::{embed_forward, EmbeddingInit, EmbeddingTable, UnseenFeatures};
pub use network::{backward, forward, BackwardTape, ForwardPass, Gradients, Network, WeightId};
pub use ops::{
    copy_op_forward, das_forward, ffm_forward, ffm_forward_bruteforce, fm_forward,
    fm_forward_bruteforce, EmbeddingOp,
};
pub use probit::{probit_gradient, probit_log_z};
pub use relu::relu_moments;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("feature {0} has no embedding and auto-initialization is disabled")]
    UnknownFeature(u64),
    #[error("field {field} is outside 1..={num_fields}")]
    FieldOutOfRange { field: u32, num_fields: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward pass was run without gradient recording")]
    StaleTape,
}

/// Means and variances of a vector of activations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentVector {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MomentVector {
    pub fn new(means: Vec<f64>, variances: Vec<f64>) -> Result<Self, LayerError> {
        if means.len() != variances.len() {
            return Err(LayerError::ShapeMismatch(format!(
                "{} means vs {} variances",
                means.len(),
                variances.len()
            )));
        }
        Ok(Self { means, variances })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            means: vec![0.0; len],
            variances: vec![0.0; len],
        }
    }

    /// Point masses at `values`.
    pub fn deterministic(values: Vec<f64>) -> Self {
        let variances = vec![0.0; values.len()];
        Self {
            means: values,
            variances,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        (self.means[i], self.variances[i])
    }

    pub(crate) fn with_capacity(len: usize) -> Self {
        Self {
            means: Vec::with_capacity(len),
            variances: Vec::with_capacity(len),
        }
    }

    pub(crate) fn push(&mut self, mean: f64, variance: f64) {
        self.means.push(mean);
        self.variances.push(variance);
    }
}

/// Upstream gradient with respect to a [`MomentVector`].
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct MomentGrad {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MomentGrad {
    pub fn zeros(len: usize) -> Self {
        Self {
            means: vec![0.0; len],
            variances: vec![0.0; len],
        }
    }
}
