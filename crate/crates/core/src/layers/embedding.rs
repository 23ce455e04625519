use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerError, MomentVector};
use crate::data::SparseInstance;
use crate::gaussian::Gaussian;

/// How freshly touched embedding entries are initialized.
///
/// Initialization is a pure function of `(seed, feature, slot)` so the same
/// feature gets the same prior in every replica of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingInit {
    pub mean: f64,
    pub variance: f64,
    /// Std. dev. of a deterministic per-entry offset added to `mean`.
    pub jitter: f64,
    pub seed: u64,
}

impl EmbeddingInit {
    pub fn fresh(&self, feature: u64, width: usize) -> Vec<Gaussian> {
        if self.jitter == 0.0 {
            return vec![Gaussian::new_unchecked(self.mean, self.variance); width];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ feature.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        // uniform on [-sqrt(3), sqrt(3)] has unit variance
        let half_width = self.jitter * 3f64.sqrt();
        (0..width)
            .map(|_| {
                let offset = rng.random_range(-half_width..=half_width);
                Gaussian::new_unchecked(self.mean + offset, self.variance)
            })
            .collect()
    }
}

/// What to do with a feature that has no stored embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnseenFeatures {
    /// Use the initializer's fresh vector.
    Fresh,
    Reject,
}

/// Per-feature Gaussian embedding vectors, grown on first touch.
///
/// Each vector has `width` entries: `K` for the copy, sum and FM
/// operations, `F * K` (field-major) for FFM.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    width: usize,
    init: EmbeddingInit,
    vectors: HashMap<u64, Vec<Gaussian>>,
}

impl EmbeddingTable {
    pub fn new(width: usize, init: EmbeddingInit) -> Self {
        Self {
            width,
            init,
            vectors: HashMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn init(&self) -> &EmbeddingInit {
        &self.init
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, feature: u64) -> Option<&[Gaussian]> {
        self.vectors.get(&feature).map(Vec::as_slice)
    }

    pub fn contains(&self, feature: u64) -> bool {
        self.vectors.contains_key(&feature)
    }

    /// The stored vector, or the fresh one the feature would start from.
    pub fn get_or_fresh(&self, feature: u64) -> std::borrow::Cow<'_, [Gaussian]> {
        match self.vectors.get(&feature) {
            Some(v) => std::borrow::Cow::Borrowed(v.as_slice()),
            None => std::borrow::Cow::Owned(self.init.fresh(feature, self.width)),
        }
    }

    pub fn get_or_insert(&mut self, feature: u64) -> &mut Vec<Gaussian> {
        let (init, width) = (self.init, self.width);
        self.vectors
            .entry(feature)
            .or_insert_with(|| init.fresh(feature, width))
    }

    /// Inserts a vector, replacing any existing one.
    pub fn insert(&mut self, feature: u64, vector: Vec<Gaussian>) -> Result<(), LayerError> {
        if vector.len() != self.width {
            return Err(LayerError::ShapeMismatch(format!(
                "embedding of width {} in a table of width {}",
                vector.len(),
                self.width
            )));
        }
        self.vectors.insert(feature, vector);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[Gaussian])> {
        self.vectors.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (u64, &mut Vec<Gaussian>)> {
        self.vectors.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Feature ids in ascending order.
    pub fn sorted_features(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.vectors.keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// Gathers the instance's embedding moments, concatenated in feature order.
pub fn embed_forward(
    instance: &SparseInstance,
    table: &EmbeddingTable,
    unseen: UnseenFeatures,
) -> Result<MomentVector, LayerError> {
    let mut out = MomentVector::with_capacity(instance.features.len() * table.width);
    for feature in &instance.features {
        let vector = match (table.get(feature.id), unseen) {
            (Some(v), _) => std::borrow::Cow::Borrowed(v),
            (None, UnseenFeatures::Fresh) => std::borrow::Cow::Owned(table.init.fresh(feature.id, table.width)),
            (None, UnseenFeatures::Reject) => return Err(LayerError::UnknownFeature(feature.id)),
        };
        for g in vector.iter() {
            out.push(g.mean(), g.variance());
        }
    }
    Ok(out)
}
