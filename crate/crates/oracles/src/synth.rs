//! Seeded click streams with a known ground-truth probit FM.

use bodl::{Feature, Label, SparseInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_fields: usize,
    pub values_per_field: usize,
    pub rank: usize,
    pub base_ctr: f64,
    /// Std. dev. of the first-order weights.
    pub linear_scale: f64,
    /// Std. dev. of the latent factor entries.
    pub interaction_scale: f64,
    /// Give every feature one latent vector per opposing field.
    pub field_aware: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_fields: 6,
            values_per_field: 5,
            rank: 2,
            base_ctr: 0.05,
            linear_scale: 0.1,
            interaction_scale: 0.4,
            field_aware: false,
            seed: 1,
        }
    }
}

/// Ground truth `P(click | x) = Phi(b + sum_i w_i + sum_{i<j} <u_i, u_j>)`
/// over one categorical value per field, with `b` solved so the average
/// click rate over uniformly drawn rows equals `base_ctr`.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    config: SyntheticConfig,
    bias: f64,
    linear: Vec<f64>,
    latent: Vec<f64>,
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

impl SyntheticStream {
    pub fn new(config: SyntheticConfig) -> Self {
        assert!(config.num_fields >= 2 && config.values_per_field >= 1 && config.rank >= 1);
        assert!(config.base_ctr > 0.0 && config.base_ctr < 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let features = config.num_fields * config.values_per_field;
        let copies = if config.field_aware { config.num_fields } else { 1 };
        let mut normal = |s: f64| -> f64 {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * s
        };
        let linear = (0..features).map(|_| normal(config.linear_scale)).collect();
        let mut latent: Vec<f64> = (0..features * copies * config.rank)
            .map(|_| normal(config.interaction_scale))
            .collect();
        // center each field's factors so interactions carry no marginal
        // (first-order) signal
        let block = copies * config.rank;
        let per_field = config.values_per_field;
        for f in 0..config.num_fields {
            for j in 0..block {
                let idx = |v: usize| ((f * per_field + v) * block) + j;
                let mean = (0..per_field).map(|v| latent[idx(v)]).sum::<f64>() / per_field as f64;
                if per_field > 1 {
                    for v in 0..per_field {
                        latent[idx(v)] -= mean;
                    }
                }
            }
        }
        let mut out = Self {
            config,
            bias: 0.0,
            linear,
            latent,
        };
        out.bias = out.solve_bias();
        out
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn num_features(&self) -> usize {
        self.config.num_fields * self.config.values_per_field
    }

    /// Feature id of `value` (0-based) in `field` (1-based).
    pub fn feature_id(&self, field: u32, value: usize) -> u64 {
        1 + (field as u64 - 1) * self.config.values_per_field as u64 + value as u64
    }

    fn index(&self, f: &Feature) -> usize {
        (f.id - 1) as usize
    }

    fn factor(&self, feature: usize, other_field: u32) -> &[f64] {
        let r = self.config.rank;
        let copy = if self.config.field_aware {
            other_field as usize - 1
        } else {
            0
        };
        let copies = if self.config.field_aware { self.config.num_fields } else { 1 };
        let start = (feature * copies + copy) * r;
        &self.latent[start..start + r]
    }

    fn score_without_bias(&self, features: &[Feature]) -> f64 {
        let mut s: f64 = features.iter().map(|f| self.linear[self.index(f)]).sum();
        for (i, a) in features.iter().enumerate() {
            for b in &features[i + 1..] {
                let u = self.factor(self.index(a), b.field);
                let w = self.factor(self.index(b), a.field);
                s += u.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        s
    }

    /// True click probability of a row.
    pub fn probability(&self, features: &[Feature]) -> f64 {
        phi(self.bias + self.score_without_bias(features))
    }

    fn row(&self, choices: impl Iterator<Item = usize>) -> Vec<Feature> {
        choices
            .enumerate()
            .map(|(f, v)| Feature::new(f as u32 + 1, self.feature_id(f as u32 + 1, v)))
            .collect()
    }

    fn calibration_rows(&self) -> Vec<f64> {
        let c = &self.config;
        let total = (c.values_per_field as f64).powi(c.num_fields as i32);
        if total <= 200_000.0 {
            (0..total as usize)
                .map(|mut code| {
                    let row = self.row((0..c.num_fields).map(|_| {
                        let v = code % c.values_per_field;
                        code /= c.values_per_field;
                        v
                    }));
                    self.score_without_bias(&row)
                })
                .collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0xB1A5);
            (0..200_000)
                .map(|_| {
                    let row = self.row((0..c.num_fields).map(|_| rng.random_range(0..c.values_per_field)));
                    self.score_without_bias(&row)
                })
                .collect()
        }
    }

    fn solve_bias(&self) -> f64 {
        let scores = self.calibration_rows();
        let rate = |b: f64| scores.iter().map(|s| phi(b + s)).sum::<f64>() / scores.len() as f64;
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) < self.config.base_ctr {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Exact average click rate over uniformly drawn rows (or its estimate
    /// on a fixed sample for large grids).
    pub fn expected_ctr(&self) -> f64 {
        let scores = self.calibration_rows();
        scores.iter().map(|s| phi(self.bias + s)).sum::<f64>() / scores.len() as f64
    }

    /// `n` labeled rows drawn with the given seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<SparseInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        (0..n)
            .map(|_| {
                let features = self.row((0..c.num_fields).map(|_| rng.random_range(0..c.values_per_field)));
                let p = self.probability(&features);
                let label = if rng.random::<f64>() < p { Label::Click } else { Label::NoClick };
                SparseInstance::new(label, features)
            })
            .collect()
    }

    /// Like [`SyntheticStream::sample`] but also returns each row's true
    /// click probability.
    pub fn sample_with_truth(&self, n: usize, seed: u64) -> (Vec<SparseInstance>, Vec<f64>) {
        let rows = self.sample(n, seed);
        let truth = rows.iter().map(|r| self.probability(&r.features)).collect();
        (rows, truth)
    }
}
