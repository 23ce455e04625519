use bodl::Gaussian;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub variance: f64,
    pub std_error_mean: f64,
    pub std_error_variance: f64,
    pub n: usize,
}

impl McEstimate {
    /// `|mean - x| <= sigmas * SE`.
    pub fn mean_within(&self, x: f64, sigmas: f64) -> bool {
        (self.mean - x).abs() <= sigmas * self.std_error_mean
    }

    pub fn variance_within(&self, x: f64, sigmas: f64) -> bool {
        (self.variance - x).abs() <= sigmas * self.std_error_variance
    }
}

/// A layer evaluated on one sample of its random inputs.
///
/// Embedding inputs are laid out feature-major: `M x K` entries, or
/// `M x F x K` for `Ffm`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Relu,
    Copy,
    /// Per-dimension sum over features.
    DimSum { k: usize },
    /// Per-dimension sum of products over feature pairs.
    Fm { k: usize },
    /// `sum_{i<j} z_i[f_j][k] z_j[f_i][k]` with 1-based fields.
    Ffm { k: usize, fields: Vec<u32>, num_fields: usize },
    /// `a_r = sum_c W[r][c] z_c / sqrt(cols)` with a constant 1 appended to
    /// `z` as the last column.
    Dense { rows: usize, cols: usize, weights: Vec<Gaussian> },
}

impl LayerSpec {
    fn outputs(&self, inputs: usize) -> usize {
        match self {
            LayerSpec::Relu | LayerSpec::Copy => inputs,
            LayerSpec::DimSum { k } | LayerSpec::Fm { k } | LayerSpec::Ffm { k, .. } => *k,
            LayerSpec::Dense { rows, .. } => *rows,
        }
    }

    fn eval(&self, z: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            LayerSpec::Relu => {
                for (o, &x) in out.iter_mut().zip(z) {
                    *o = if x > 0.0 { x } else { 0.0 };
                }
            }
            LayerSpec::Copy => out.copy_from_slice(z),
            LayerSpec::DimSum { k } => {
                for (i, &x) in z.iter().enumerate() {
                    out[i % k] += x;
                }
            }
            LayerSpec::Fm { k } => {
                let m = z.len() / k;
                for i in 0..m {
                    for j in i + 1..m {
                        for d in 0..*k {
                            out[d] += z[i * k + d] * z[j * k + d];
                        }
                    }
                }
            }
            LayerSpec::Ffm { k, fields, num_fields } => {
                let at = |i: usize, f: u32, d: usize| z[(i * num_fields + (f as usize - 1)) * k + d];
                for i in 0..fields.len() {
                    for j in i + 1..fields.len() {
                        for d in 0..*k {
                            out[d] += at(i, fields[j], d) * at(j, fields[i], d);
                        }
                    }
                }
            }
            LayerSpec::Dense { rows, cols, .. } => {
                let scale = (*cols as f64).sqrt();
                for r in 0..*rows {
                    let mut acc = w[r * cols + cols - 1];
                    for c in 0..cols - 1 {
                        acc += w[r * cols + c] * z[c];
                    }
                    out[r] = acc / scale;
                }
            }
        }
    }

    fn weights(&self) -> &[Gaussian] {
        match self {
            LayerSpec::Dense { weights, .. } => weights,
            _ => &[],
        }
    }
}

const CHUNK: usize = 1 << 14;

/// Pushes `n` joint samples of `inputs` (and of dense weights) through the
/// layer and reports the empirical moments of each output.
///
/// Chunk `c` draws from the ChaCha8 stream `c` of `seed`, so results do
/// not depend on the thread count.
pub fn mc_layer_moments(spec: &LayerSpec, inputs: &[Gaussian], n: usize, seed: u64) -> Vec<McEstimate> {
    assert!(n >= 2, "need at least two samples");
    let outs = spec.outputs(inputs.len());
    let weights = spec.weights();
    let chunks = n.div_ceil(CHUNK);
    let samples: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            let mut z = vec![0.0; inputs.len()];
            let mut w = vec![0.0; weights.len()];
            let mut out = vec![0.0; outs];
            let mut buf = Vec::with_capacity(len * outs);
            let draw = |g: &Gaussian, rng: &mut ChaCha8Rng| {
                let e: f64 = StandardNormal.sample(rng);
                g.mean() + g.variance().sqrt() * e
            };
            for _ in 0..len {
                for (x, g) in z.iter_mut().zip(inputs) {
                    *x = draw(g, &mut rng);
                }
                for (x, g) in w.iter_mut().zip(weights) {
                    *x = draw(g, &mut rng);
                }
                spec.eval(&z, &w, &mut out);
                buf.extend_from_slice(&out);
            }
            buf
        })
        .collect();

    (0..outs)
        .map(|o| {
            let values = || samples.iter().flat_map(|b| b.iter().skip(o).step_by(outs));
            let nf = n as f64;
            let mean = values().sum::<f64>() / nf;
            let (mut m2, mut m4) = (0.0, 0.0);
            for &x in values() {
                let d2 = (x - mean) * (x - mean);
                m2 += d2;
                m4 += d2 * d2;
            }
            let variance = m2 / (nf - 1.0);
            let m4 = m4 / nf;
            let pop = m2 / nf;
            McEstimate {
                mean,
                variance,
                std_error_mean: (variance / nf).sqrt(),
                std_error_variance: ((m4 - pop * pop).max(0.0) / nf).sqrt(),
                n,
            }
        })
        .collect()
}
