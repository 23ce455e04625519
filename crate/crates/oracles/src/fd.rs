use std::collections::BTreeMap;

use bodl::{AdfGradient, Gaussian, Model, SparseInstance, WeightId};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("step {h} is not below variance {variance} of {id:?}")]
    StepTooLarge { id: WeightId, variance: f64, h: f64 },
    #[error("step {0} outside [1e-8, 1e-4]")]
    BadStep(f64),
    #[error("forward pass failed: {0}")]
    Forward(String),
}

fn log_z(model: &Model, instance: &SparseInstance) -> Result<f64, FdError> {
    let pass = model.forward(instance, false).map_err(|e| FdError::Forward(e.to_string()))?;
    Ok(pass.log_z(instance.label))
}

/// Weights a forward pass on `instance` reads: every embedding entry of
/// its features and every dense weight.
pub fn touched_weights(model: &Model, instance: &SparseInstance) -> Vec<WeightId> {
    let width = model.embedding().width();
    let mut ids: Vec<WeightId> = instance
        .features
        .iter()
        .flat_map(|f| {
            (0..width).map(move |slot| WeightId::Embedding {
                feature: f.id,
                slot: slot as u32,
            })
        })
        .collect();
    for (l, layer) in model.dense_layers().iter().enumerate() {
        for row in 0..layer.rows() {
            for col in 0..layer.cols() {
                ids.push(WeightId::Dense {
                    layer: l as u32,
                    row: row as u32,
                    col: col as u32,
                });
            }
        }
    }
    ids
}

/// Central-difference derivatives of the example's `log Z` with respect
/// to the mean and variance of every touched weight.
pub fn finite_diff_gradients(
    model: &Model,
    instance: &SparseInstance,
    h: f64,
) -> Result<BTreeMap<WeightId, AdfGradient>, FdError> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(FdError::BadStep(h));
    }
    let ids = touched_weights(model, instance);
    let mut base = model.clone();
    base.touch(instance);
    for &id in &ids {
        let variance = base.weight(id).expect("touched").variance();
        if variance - h <= 0.0 {
            return Err(FdError::StepTooLarge { id, variance, h });
        }
    }
    let mut out = BTreeMap::new();
    for &id in &ids {
        let g = base.weight(id).expect("touched");
        let at = |mean: f64, var: f64| -> Result<f64, FdError> {
            let mut m = base.clone();
            *m.weight_mut(id).expect("touched") = Gaussian::new(mean, var).expect("valid perturbation");
            log_z(&m, instance)
        };
        let d_mean = (at(g.mean() + h, g.variance())? - at(g.mean() - h, g.variance())?) / (2.0 * h);
        let d_var = (at(g.mean(), g.variance() + h)? - at(g.mean(), g.variance() - h)?) / (2.0 * h);
        out.insert(id, AdfGradient::new(d_mean, d_var));
    }
    Ok(out)
}
