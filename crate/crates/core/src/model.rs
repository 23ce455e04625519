//! Model families built from the layers: a deep probit network with a copy,
//! dimension-aware-sum, FM or FFM embedding operation in front of an
//! optional ReLU stack.
//!
//! `hidden_sizes = []` with the copy operation and `K = 1` is the linear
//! probit model: the output is the sum of the touched feature weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{check_rate, BadRate, SparseInstance};
use crate::gaussian::{adf_update, weight_decay, Gaussian, VarianceBounds};
use crate::layers::{
    self, DenseLayerWeights, EmbeddingInit, EmbeddingOp, EmbeddingTable, ForwardPass, LayerError,
    Network, UnseenFeatures, WeightId,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    BadRate(#[from] BadRate),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embedding_op: EmbeddingOp,
    /// Embedding dimension.
    pub k: usize,
    /// Field count. Required by FFM and by the copy operation in front of
    /// dense layers.
    pub num_fields: usize,
    pub hidden_sizes: Vec<usize>,
    pub prior_mean_embedding: f64,
    pub prior_variance: f64,
    /// Std. dev. of the deterministic per-entry offset of fresh embedding
    /// means. `None` picks `sqrt(prior_variance)` for FM/FFM and zero
    /// otherwise.
    pub embedding_jitter: Option<f64>,
    pub init_seed: u64,
    pub decay_eps: f64,
    pub bounds: VarianceBounds,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_op: EmbeddingOp::Copy,
            k: 1,
            num_fields: 0,
            hidden_sizes: Vec::new(),
            prior_mean_embedding: 0.0,
            prior_variance: 0.01,
            embedding_jitter: None,
            init_seed: 0,
            decay_eps: 0.0,
            bounds: VarianceBounds::default(),
        }
    }
}

impl ModelConfig {
    /// The linear probit baseline.
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.k == 0 {
            return bad("embedding dimension must be at least 1");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden layer sizes must be at least 1");
        }
        if !self.bounds.is_valid() {
            return bad("variance floor must be positive and below the ceiling");
        }
        if !(self.prior_variance.is_finite() && self.bounds.contains(self.prior_variance)) {
            return bad("prior variance must lie within the variance bounds");
        }
        if !self.prior_mean_embedding.is_finite() {
            return bad("prior mean must be finite");
        }
        if !(0.0..=1.0).contains(&self.decay_eps) {
            return bad("decay rate must lie in [0, 1]");
        }
        if let Some(j) = self.embedding_jitter {
            if !(j.is_finite() && j >= 0.0) {
                return bad("embedding jitter must be finite and non-negative");
            }
        }
        let needs_fields = self.embedding_op == EmbeddingOp::Ffm
            || (self.embedding_op == EmbeddingOp::Copy && !self.hidden_sizes.is_empty());
        if needs_fields && self.num_fields == 0 {
            return bad("this architecture needs a field count of at least 1");
        }
        Ok(())
    }

    pub fn resolved_jitter(&self) -> f64 {
        self.embedding_jitter.unwrap_or(match self.embedding_op {
            EmbeddingOp::Fm | EmbeddingOp::Ffm => self.prior_variance.sqrt(),
            EmbeddingOp::Copy | EmbeddingOp::DimensionAwareSum => 0.0,
        })
    }

    /// Entries per feature embedding.
    pub fn embedding_width(&self) -> usize {
        match self.embedding_op {
            EmbeddingOp::Ffm => self.num_fields * self.k,
            _ => self.k,
        }
    }

    /// Width of the embedding-operation output fed to the first dense layer.
    pub fn op_output_width(&self) -> usize {
        match self.embedding_op {
            EmbeddingOp::Copy => self.num_fields * self.k,
            _ => self.k,
        }
    }

    /// `(rows, cols)` of every dense layer, bias column included.
    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        if self.hidden_sizes.is_empty() {
            return Vec::new();
        }
        let mut shapes = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut fan_in = self.op_output_width();
        for &h in self.hidden_sizes.iter().chain(std::iter::once(&1)) {
            shapes.push((h, fan_in + 1));
            fan_in = h;
        }
        shapes
    }

    pub fn dense_weight_count(&self) -> usize {
        self.dense_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// `q = p / (p + (1 - p) / w)`: maps a probability learned on a stream
/// whose negatives were kept at rate `w` back to the full stream.
pub fn calibrate(p: f64, w: f64) -> Result<f64, BadRate> {
    check_rate(w)?;
    Ok(p / (p + (1.0 - p) / w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    /// Log evidence of the example before the update.
    pub log_z: f64,
    /// `P(click)` before the update; the progressive-validation score.
    pub click_probability: f64,
    pub updated_weights: usize,
    pub skipped_weights: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embedding: EmbeddingTable,
    dense: Vec<DenseLayerWeights>,
    update_count: u64,
    skip_count: u64,
    clamp_count: u64,
    sample_rate: f64,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let init = EmbeddingInit {
            mean: config.prior_mean_embedding,
            variance: config.prior_variance,
            jitter: config.resolved_jitter(),
            seed: config.init_seed,
        };
        let embedding = EmbeddingTable::new(config.embedding_width(), init);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let scale = config.prior_variance.sqrt();
        let dense = config
            .dense_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let weights = (0..rows * cols)
                    .map(|i| {
                        let mean = if i % cols == cols - 1 {
                            0.0
                        } else {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * scale
                        };
                        Gaussian::new_unchecked(mean, config.prior_variance)
                    })
                    .collect();
                DenseLayerWeights::new(rows, cols, weights)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config,
            embedding,
            dense,
            update_count: 0,
            skip_count: 0,
            clamp_count: 0,
            sample_rate: 1.0,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        embedding: EmbeddingTable,
        dense: Vec<DenseLayerWeights>,
        counters: [u64; 3],
        sample_rate: f64,
    ) -> Self {
        Self {
            config,
            embedding,
            dense,
            update_count: counters[0],
            skip_count: counters[1],
            clamp_count: counters[2],
            sample_rate,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    pub fn dense_layers(&self) -> &[DenseLayerWeights] {
        &self.dense
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Weight updates rejected as degenerate.
    pub fn skip_count(&self) -> u64 {
        self.skip_count
    }

    /// Merges whose variance had to be clamped.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    pub(crate) fn add_clamps(&mut self, n: u64) {
        self.clamp_count += n;
    }

    pub(crate) fn add_updates(&mut self, updates: u64, skips: u64) {
        self.update_count += updates;
        self.skip_count += skips;
    }

    /// Negative-sampling rate of the training stream; used to calibrate.
    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn set_sample_rate(&mut self, w: f64) -> Result<(), BadRate> {
        self.sample_rate = check_rate(w)?;
        Ok(())
    }

    pub fn network(&self, unseen: UnseenFeatures) -> Network<'_> {
        Network {
            op: self.config.embedding_op,
            k: self.config.k,
            num_fields: self.config.num_fields,
            embedding: &self.embedding,
            dense: &self.dense,
            unseen,
        }
    }

    pub fn forward(&self, instance: &SparseInstance, record: bool) -> Result<ForwardPass<'_>, LayerError> {
        layers::forward(&self.network(UnseenFeatures::Fresh), instance, record)
    }

    /// `P(click | x)` on the training distribution. Unseen features use
    /// their fresh prior embeddings.
    pub fn predict(&self, instance: &SparseInstance) -> Result<f64, ModelError> {
        Ok(self.forward(instance, false)?.click_probability())
    }

    /// [`Model::predict`] mapped through [`calibrate`] with the model's
    /// sample rate.
    pub fn predict_calibrated(&self, instance: &SparseInstance) -> Result<f64, ModelError> {
        Ok(calibrate(self.predict(instance)?, self.sample_rate)?)
    }

    /// One ADF step on a labeled example.
    pub fn update(&mut self, instance: &SparseInstance) -> Result<UpdateReport, ModelError> {
        self.update_observed(instance, |_, _, _| {})
    }

    /// [`Model::update`], reporting every accepted `(weight, before, after)`.
    pub fn update_observed(
        &mut self,
        instance: &SparseInstance,
        mut observer: impl FnMut(WeightId, Gaussian, Gaussian),
    ) -> Result<UpdateReport, ModelError> {
        let pass = self.forward(instance, true)?;
        let click_probability = pass.click_probability();
        let grads = layers::backward(pass, instance.label)?;
        let bounds = self.config.bounds;
        let mut updated = 0;
        let mut skipped = 0;
        let mut apply = |id: WeightId, slot: &mut Gaussian, grad| match adf_update(*slot, grad, bounds) {
            Ok(post) => {
                observer(id, *slot, post);
                *slot = post;
                updated += 1;
            }
            Err(_) => skipped += 1,
        };
        for (feature, feature_grads) in grads.embedding() {
            let vector = self.embedding.get_or_insert(*feature);
            for (slot, (g, grad)) in vector.iter_mut().zip(feature_grads).enumerate() {
                let id = WeightId::Embedding {
                    feature: *feature,
                    slot: slot as u32,
                };
                apply(id, g, *grad);
            }
        }
        for (l, (layer, layer_grads)) in self.dense.iter_mut().zip(grads.dense()).enumerate() {
            let cols = layer.cols();
            for (i, (g, grad)) in layer.weights_mut().iter_mut().zip(layer_grads).enumerate() {
                let id = WeightId::Dense {
                    layer: l as u32,
                    row: (i / cols) as u32,
                    col: (i % cols) as u32,
                };
                apply(id, g, *grad);
            }
        }
        self.update_count += 1;
        self.skip_count += skipped as u64;
        Ok(UpdateReport {
            log_z: grads.log_z,
            click_probability,
            updated_weights: updated,
            skipped_weights: skipped,
        })
    }

    /// Relaxes every variance toward the prior variance at rate
    /// `decay_eps`. Returns how many variances changed.
    pub fn decay_all(&mut self) -> usize {
        let eps = self.config.decay_eps;
        if eps == 0.0 {
            return 0;
        }
        let prior = self.config.prior_variance;
        let mut changed = 0;
        let mut decay = |g: &mut Gaussian| {
            let v = weight_decay(g.variance(), prior, eps);
            if v != g.variance() {
                *g = Gaussian::new_unchecked(g.mean(), v);
                changed += 1;
            }
        };
        for (_, vector) in self.embedding.iter_mut() {
            vector.iter_mut().for_each(&mut decay);
        }
        for layer in &mut self.dense {
            layer.weights_mut().iter_mut().for_each(&mut decay);
        }
        changed
    }

    /// The stored belief of a weight; `None` for embeddings never touched
    /// and out-of-range addresses.
    pub fn weight(&self, id: WeightId) -> Option<Gaussian> {
        match id {
            WeightId::Embedding { feature, slot } => self.embedding.get(feature)?.get(slot as usize).copied(),
            WeightId::Dense { layer, row, col } => {
                let layer = self.dense.get(layer as usize)?;
                if row as usize >= layer.rows() || col as usize >= layer.cols() {
                    return None;
                }
                Some(layer.get(row as usize, col as usize))
            }
        }
    }

    /// Like [`Model::weight`] but falls back to the fresh embedding prior.
    pub fn weight_or_prior(&self, id: WeightId) -> Option<Gaussian> {
        match id {
            WeightId::Embedding { feature, slot } => {
                self.embedding.get_or_fresh(feature).get(slot as usize).copied()
            }
            dense => self.weight(dense),
        }
    }

    /// Mutable access, creating untouched embeddings at their prior.
    pub fn weight_mut(&mut self, id: WeightId) -> Option<&mut Gaussian> {
        match id {
            WeightId::Embedding { feature, slot } => {
                if slot as usize >= self.embedding.width() {
                    return None;
                }
                self.embedding.get_or_insert(feature).get_mut(slot as usize)
            }
            WeightId::Dense { layer, row, col } => {
                let layer = self.dense.get_mut(layer as usize)?;
                if row as usize >= layer.rows() || col as usize >= layer.cols() {
                    return None;
                }
                let cols = layer.cols();
                layer.weights_mut().get_mut(row as usize * cols + col as usize)
            }
        }
    }

    /// Creates the instance's embeddings at their prior if missing.
    pub fn touch(&mut self, instance: &SparseInstance) {
        for f in &instance.features {
            self.embedding.get_or_insert(f.id);
        }
    }

    /// Every stored weight in a fixed order: embeddings by ascending
    /// feature id, then dense layers row-major.
    pub fn weights(&self) -> Vec<(WeightId, Gaussian)> {
        let mut out = Vec::new();
        for feature in self.embedding.sorted_features() {
            let vector = self.embedding.get(feature).expect("listed feature");
            for (slot, g) in vector.iter().enumerate() {
                out.push((
                    WeightId::Embedding {
                        feature,
                        slot: slot as u32,
                    },
                    *g,
                ));
            }
        }
        for (l, layer) in self.dense.iter().enumerate() {
            for (i, g) in layer.weights().iter().enumerate() {
                out.push((
                    WeightId::Dense {
                        layer: l as u32,
                        row: (i / layer.cols()) as u32,
                        col: (i % layer.cols()) as u32,
                    },
                    *g,
                ));
            }
        }
        out
    }
}
