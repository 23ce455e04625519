use super::{LayerError, MomentGrad, MomentVector};
use crate::gaussian::{AdfGradient, Gaussian};

/// Gaussian weights of one fully connected layer. The last column
/// multiplies a deterministic bias input of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerWeights {
    rows: usize,
    cols: usize,
    weights: Vec<Gaussian>,
}

impl DenseLayerWeights {
    pub fn new(rows: usize, cols: usize, weights: Vec<Gaussian>) -> Result<Self, LayerError> {
        if rows == 0 || cols < 2 || weights.len() != rows * cols {
            return Err(LayerError::ShapeMismatch(format!(
                "{} weights for a {rows}x{cols} layer",
                weights.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Fan-in including the bias column.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Gaussian {
        self.weights[row * self.cols + col]
    }

    pub fn weights(&self) -> &[Gaussian] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Gaussian] {
        &mut self.weights
    }
}

fn with_bias(z: &MomentVector) -> MomentVector {
    let mut zin = z.clone();
    zin.push(1.0, 0.0);
    zin
}

/// Moments of `a = W [z; 1] / sqrt(V + 1)` with independent Gaussian
/// weights and inputs.
pub fn dense_forward(z: &MomentVector, layer: &DenseLayerWeights) -> Result<MomentVector, LayerError> {
    if z.len() + 1 != layer.cols {
        return Err(LayerError::ShapeMismatch(format!(
            "input of length {} into a layer with {} columns",
            z.len(),
            layer.cols
        )));
    }
    let zin = with_bias(z);
    let n = layer.cols as f64;
    let scale = n.sqrt();
    let mut out = MomentVector::with_capacity(layer.rows);
    for r in 0..layer.rows {
        let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
        let mut mean = 0.0;
        let mut var = 0.0;
        for (w, (&zm, &zv)) in row.iter().zip(zin.means.iter().zip(&zin.variances)) {
            let (wm, wv) = (w.mean(), w.variance());
            mean += wm * zm;
            var += wv * zv + wm * wm * zv + wv * zm * zm;
        }
        out.push(mean / scale, var / n);
    }
    Ok(out)
}

/// Returns the gradient with respect to the layer input (without the bias
/// entry) and the row-major weight gradients.
pub(crate) fn dense_backward(
    z: &MomentVector,
    layer: &DenseLayerWeights,
    grad: &MomentGrad,
) -> (MomentGrad, Vec<AdfGradient>) {
    let zin = with_bias(z);
    let n = layer.cols as f64;
    let scale = n.sqrt();
    let mut g_in = MomentGrad::zeros(layer.cols);
    let mut g_w = Vec::with_capacity(layer.weights.len());
    for r in 0..layer.rows {
        let (gm, gv) = (grad.means[r], grad.variances[r]);
        for c in 0..layer.cols {
            let w = layer.weights[r * layer.cols + c];
            let (wm, wv) = (w.mean(), w.variance());
            let (zm, zv) = (zin.means[c], zin.variances[c]);
            g_w.push(AdfGradient::new(
                gm * zm / scale + gv * 2.0 * wm * zv / n,
                gv * (zv + zm * zm) / n,
            ));
            g_in.means[c] += gm * wm / scale + gv * 2.0 * wv * zm / n;
            g_in.variances[c] += gv * (wv + wm * wm) / n;
        }
    }
    g_in.means.pop();
    g_in.variances.pop();
    (g_in, g_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(rows: usize, cols: usize, params: &[(f64, f64)]) -> DenseLayerWeights {
        // a weight belief is never a point mass; 1e-300 stands in for zero
        let weights = params
            .iter()
            .map(|&(m, v)| Gaussian::new(m, if v == 0.0 { 1e-300 } else { v }).unwrap())
            .collect();
        DenseLayerWeights::new(rows, cols, weights).unwrap()
    }

    #[test]
    fn deterministic_layer() {
        let l = layer(2, 3, &[(1.0, 0.0), (2.0, 0.0), (0.5, 0.0), (-1.0, 0.0), (0.0, 0.0), (3.0, 0.0)]);
        let z = MomentVector::deterministic(vec![2.0, -1.0]);
        let out = dense_forward(&z, &l).unwrap();
        let s = 3f64.sqrt();
        assert!((out.means[0] - (2.0 - 2.0 + 0.5) / s).abs() < 1e-15);
        assert!((out.means[1] - (-2.0 + 3.0) / s).abs() < 1e-15);
        assert!(out.variances.iter().all(|&v| v < 1e-250));
    }

    #[test]
    fn single_unit_variance() {
        // weight (0, 1), bias weight deterministic zero, input (0, 1)
        let l = layer(1, 2, &[(0.0, 1.0), (0.0, 0.0)]);
        let z = MomentVector::new(vec![0.0], vec![1.0]).unwrap();
        let out = dense_forward(&z, &l).unwrap();
        assert_eq!(out.means, vec![0.0]);
        assert!((out.variances[0] - 0.5).abs() < 1e-250);
    }

    #[test]
    fn shape_mismatch() {
        let l = layer(1, 2, &[(0.0, 1.0), (0.0, 1.0)]);
        let z = MomentVector::zeros(2);
        assert!(matches!(dense_forward(&z, &l), Err(LayerError::ShapeMismatch(_))));
        assert!(DenseLayerWeights::new(1, 2, vec![]).is_err());
    }
}
