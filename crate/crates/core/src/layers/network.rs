//! Whole-network forward pass with an optional tape, and the reverse pass.

use super::dense::dense_backward;
use super::ops::{das_backward, ffm_backward, field_slots, field_slots_backward, fm_backward};
use super::relu::relu_backward;
use super::{
    copy_op_forward, das_forward, dense_forward, embed_forward, ffm_forward, fm_forward,
    probit_gradient, probit_log_z, relu_moments, DenseLayerWeights, EmbeddingOp, EmbeddingTable,
    LayerError, MomentGrad, MomentVector, UnseenFeatures,
};
use crate::data::{Label, SparseInstance};
use crate::gaussian::AdfGradient;

/// Stable address of one Gaussian weight.
///
/// `slot` indexes the feature's embedding vector (field-major for FFM);
/// dense `col` includes the trailing bias column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeightId {
    Embedding { feature: u64, slot: u32 },
    Dense { layer: u32, row: u32, col: u32 },
}

/// Borrowed view of everything a forward pass reads.
///
/// With no dense layers the network output is the sum of the embedding
/// operation's outputs. Otherwise every dense layer but the last is
/// followed by a ReLU and the last layer has a single linear unit.
#[derive(Debug, Clone, Copy)]
pub struct Network<'a> {
    pub op: EmbeddingOp,
    pub k: usize,
    pub num_fields: usize,
    pub embedding: &'a EmbeddingTable,
    pub dense: &'a [DenseLayerWeights],
    pub unseen: UnseenFeatures,
}

#[derive(Debug, Clone)]
struct LayerRecord {
    input: MomentVector,
    pre_activation: MomentVector,
    relu: bool,
}

/// Intermediate moments of one forward pass, enough to run the chain rule
/// in reverse. Borrows the weights it was computed against.
#[derive(Debug, Clone)]
pub struct BackwardTape<'a> {
    network: Network<'a>,
    features: Vec<u64>,
    fields: Vec<u32>,
    z_e: MomentVector,
    z0: MomentVector,
    layers: Vec<LayerRecord>,
    output: MomentVector,
}

impl BackwardTape<'_> {
    /// Number of recorded dense layers.
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn output(&self) -> &MomentVector {
        &self.output
    }

    /// Re-runs everything after the embedding gather from the recorded
    /// inputs and returns the output moments.
    pub fn replay(&self) -> Result<MomentVector, LayerError> {
        let (out, _, _) = propagate(&self.network, &self.z_e, &self.fields, false)?;
        Ok(out)
    }
}

pub struct ForwardPass<'a> {
    output: MomentVector,
    tape: Option<BackwardTape<'a>>,
}

impl<'a> ForwardPass<'a> {
    /// Mean and variance of the network output `z_L`.
    pub fn output(&self) -> (f64, f64) {
        self.output.get(0)
    }

    pub fn output_moments(&self) -> &MomentVector {
        &self.output
    }

    /// `P(y = +1 | x)`.
    pub fn click_probability(&self) -> f64 {
        let (m, v) = self.output();
        crate::gaussian::normal_cdf(m / (v + 1.0).sqrt())
    }

    pub fn log_z(&self, y: Label) -> f64 {
        probit_log_z(y, &self.output).expect("network output is scalar")
    }

    pub fn tape(&self) -> Option<&BackwardTape<'a>> {
        self.tape.as_ref()
    }
}

fn op_forward(
    net: &Network<'_>,
    z_e: &MomentVector,
    fields: &[u32],
) -> Result<MomentVector, LayerError> {
    match net.op {
        EmbeddingOp::Copy if net.dense.is_empty() => Ok(copy_op_forward(z_e)),
        EmbeddingOp::Copy => field_slots(&copy_op_forward(z_e), fields, net.num_fields, net.k),
        EmbeddingOp::DimensionAwareSum => das_forward(z_e, net.k),
        EmbeddingOp::Fm => fm_forward(z_e, net.k),
        EmbeddingOp::Ffm => ffm_forward(z_e, fields, net.num_fields, net.k),
    }
}

#[allow(clippy::type_complexity)]
fn propagate(
    net: &Network<'_>,
    z_e: &MomentVector,
    fields: &[u32],
    record: bool,
) -> Result<(MomentVector, MomentVector, Vec<LayerRecord>), LayerError> {
    let z0 = op_forward(net, z_e, fields)?;
    let mut records = Vec::new();
    if net.dense.is_empty() {
        let out = MomentVector {
            means: vec![z0.means.iter().sum()],
            variances: vec![z0.variances.iter().sum()],
        };
        return Ok((out, z0, records));
    }
    let last = net.dense.len() - 1;
    let mut h = z0.clone();
    for (l, layer) in net.dense.iter().enumerate() {
        let a = dense_forward(&h, layer)?;
        let relu = l != last;
        let next = if relu { relu_moments(&a) } else { a.clone() };
        if record {
            records.push(LayerRecord {
                input: std::mem::replace(&mut h, next),
                pre_activation: a,
                relu,
            });
        } else {
            h = next;
        }
    }
    Ok((h, z0, records))
}

/// Propagates the instance's moments through the network. With `record`
/// set the pass keeps a tape for [`backward`].
pub fn forward<'a>(
    net: &Network<'a>,
    instance: &SparseInstance,
    record: bool,
) -> Result<ForwardPass<'a>, LayerError> {
    let z_e = embed_forward(instance, net.embedding, net.unseen)?;
    let fields: Vec<u32> = instance.features.iter().map(|f| f.field).collect();
    let (output, z0, layers) = propagate(net, &z_e, &fields, record)?;
    let tape = record.then(|| BackwardTape {
        network: *net,
        features: instance.features.iter().map(|f| f.id).collect(),
        fields,
        z_e,
        z0,
        layers,
        output: output.clone(),
    });
    Ok(ForwardPass { output, tape })
}

/// Gradients of `log Z` for every weight that took part in a forward pass.
/// Weights not listed have zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub log_z: f64,
    embedding: Vec<(u64, Vec<AdfGradient>)>,
    dense: Vec<Vec<AdfGradient>>,
    dense_cols: Vec<usize>,
}

impl Gradients {
    /// Per touched feature, in instance order.
    pub fn embedding(&self) -> &[(u64, Vec<AdfGradient>)] {
        &self.embedding
    }

    /// Per dense layer, row-major.
    pub fn dense(&self) -> &[Vec<AdfGradient>] {
        &self.dense
    }

    pub fn get(&self, id: WeightId) -> AdfGradient {
        match id {
            WeightId::Embedding { feature, slot } => self
                .embedding
                .iter()
                .find(|(f, _)| *f == feature)
                .and_then(|(_, g)| g.get(slot as usize).copied())
                .unwrap_or_default(),
            WeightId::Dense { layer, row, col } => {
                let layer = layer as usize;
                match (self.dense.get(layer), self.dense_cols.get(layer)) {
                    (Some(grads), Some(&cols)) if (col as usize) < cols => grads
                        .get(row as usize * cols + col as usize)
                        .copied()
                        .unwrap_or_default(),
                    _ => AdfGradient::default(),
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (WeightId, AdfGradient)> + '_ {
        let emb = self.embedding.iter().flat_map(|(feature, grads)| {
            grads.iter().enumerate().map(move |(slot, g)| {
                (
                    WeightId::Embedding {
                        feature: *feature,
                        slot: slot as u32,
                    },
                    *g,
                )
            })
        });
        let dense = self.dense.iter().enumerate().flat_map(move |(layer, grads)| {
            let cols = self.dense_cols[layer];
            grads.iter().enumerate().map(move |(i, g)| {
                (
                    WeightId::Dense {
                        layer: layer as u32,
                        row: (i / cols) as u32,
                        col: (i % cols) as u32,
                    },
                    *g,
                )
            })
        });
        emb.chain(dense)
    }
}

/// Reverse pass: differentiates `log Z` for label `y` through the recorded
/// forward arithmetic.
pub fn backward(pass: ForwardPass<'_>, y: Label) -> Result<Gradients, LayerError> {
    let tape = pass.tape.ok_or(LayerError::StaleTape)?;
    let net = tape.network;
    let log_z = probit_log_z(y, &tape.output)?;
    let g_out = probit_gradient(y, &tape.output)?;

    let mut dense = vec![Vec::new(); tape.layers.len()];
    let g_z0 = if tape.layers.is_empty() {
        MomentGrad {
            means: vec![g_out.d_mean; tape.z0.len()],
            variances: vec![g_out.d_variance; tape.z0.len()],
        }
    } else {
        let mut g = MomentGrad {
            means: vec![g_out.d_mean],
            variances: vec![g_out.d_variance],
        };
        for (l, record) in tape.layers.iter().enumerate().rev() {
            if record.relu {
                g = relu_backward(&record.pre_activation, &g);
            }
            let (g_in, g_w) = dense_backward(&record.input, &net.dense[l], &g);
            dense[l] = g_w;
            g = g_in;
        }
        g
    };

    let m = tape.features.len();
    let g_ze = match net.op {
        EmbeddingOp::Copy if tape.layers.is_empty() => g_z0,
        EmbeddingOp::Copy => field_slots_backward(&tape.fields, net.k, &g_z0),
        EmbeddingOp::DimensionAwareSum => das_backward(m, net.k, &g_z0),
        EmbeddingOp::Fm => fm_backward(&tape.z_e, net.k, &g_z0),
        EmbeddingOp::Ffm => ffm_backward(&tape.z_e, &tape.fields, net.num_fields, net.k, &g_z0),
    };

    let width = net.embedding.width();
    let embedding = tape
        .features
        .iter()
        .enumerate()
        .map(|(i, &feature)| {
            let grads = (i * width..(i + 1) * width)
                .map(|j| AdfGradient::new(g_ze.means[j], g_ze.variances[j]))
                .collect();
            (feature, grads)
        })
        .collect();

    Ok(Gradients {
        log_z,
        embedding,
        dense,
        dense_cols: net.dense.iter().map(|d| d.cols()).collect(),
    })
}
