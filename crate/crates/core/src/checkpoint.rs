//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "BODL" | u32 version
//! config: u8 op | u32 K | u32 F | u32 L | L x u32 hidden
//!         f64 prior_mean | f64 prior_var | f64 jitter | u64 seed
//!         f64 decay_eps | f64 floor | f64 ceiling | f64 sample_rate
//!         u64 updates | u64 skips | u64 clamps
//! u64 n_embeddings, then per feature (ascending id):
//!         u64 id | width x (f64 mean, f64 var)
//! per dense layer (L + 1 of them when L > 0): rows x cols (f64 mean, f64 var), row-major
//! u64 checksum: first 8 bytes of SHA-256 over everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::gaussian::{Gaussian, VarianceBounds};
use crate::layers::{DenseLayerWeights, EmbeddingInit, EmbeddingOp, EmbeddingTable};
use crate::model::{Model, ModelConfig, ModelError};

pub const MAGIC: &[u8; 4] = b"BODL";
pub const VERSION: u32 = 1;

fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: usize) {
        self.0.extend_from_slice(&(x as u32).to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn gaussian(&mut self, g: &Gaussian) {
        self.f64(g.mean());
        self.f64(g.variance());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn gaussian(&mut self) -> Result<Gaussian, ModelError> {
        let (m, v) = (self.f64()?, self.f64()?);
        Gaussian::new(m, v).map_err(|e| corrupt(e.to_string()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u8(c.embedding_op.tag());
        w.u32(c.k);
        w.u32(c.num_fields);
        w.u32(c.hidden_sizes.len());
        for &h in &c.hidden_sizes {
            w.u32(h);
        }
        w.f64(c.prior_mean_embedding);
        w.f64(c.prior_variance);
        w.f64(c.resolved_jitter());
        w.u64(c.init_seed);
        w.f64(c.decay_eps);
        w.f64(c.bounds.floor);
        w.f64(c.bounds.ceiling);
        w.f64(self.sample_rate());
        w.u64(self.update_count());
        w.u64(self.skip_count());
        w.u64(self.clamp_count());
        let table = self.embedding();
        w.u64(table.len() as u64);
        for feature in table.sorted_features() {
            w.u64(feature);
            for g in table.get(feature).expect("listed feature") {
                w.gaussian(g);
            }
        }
        for layer in self.dense_layers() {
            for g in layer.weights() {
                w.gaussian(g);
            }
        }
        let sum = checksum(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(corrupt("truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(payload) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: payload, pos: 4 };
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let op = EmbeddingOp::from_tag(r.u8()?).ok_or_else(|| corrupt("unknown embedding operation"))?;
        let k = r.u32()?;
        let num_fields = r.u32()?;
        let depth = r.u32()?;
        if depth > r.remaining() / 4 {
            return Err(corrupt("truncated"));
        }
        let hidden_sizes = (0..depth).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let config = ModelConfig {
            embedding_op: op,
            k,
            num_fields,
            hidden_sizes,
            prior_mean_embedding: r.f64()?,
            prior_variance: r.f64()?,
            embedding_jitter: Some(r.f64()?),
            init_seed: r.u64()?,
            decay_eps: r.f64()?,
            bounds: VarianceBounds {
                floor: r.f64()?,
                ceiling: r.f64()?,
            },
        };
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        let sample_rate = r.f64()?;
        crate::data::check_rate(sample_rate).map_err(|e| corrupt(e.to_string()))?;
        let counters = [r.u64()?, r.u64()?, r.u64()?];

        let width = config.embedding_width();
        let mut table = EmbeddingTable::new(
            width,
            EmbeddingInit {
                mean: config.prior_mean_embedding,
                variance: config.prior_variance,
                jitter: config.resolved_jitter(),
                seed: config.init_seed,
            },
        );
        let n = r.u64()?;
        let entry = 8 + 16 * width as u64;
        if n > r.remaining() as u64 / entry {
            return Err(corrupt("truncated"));
        }
        let mut last = None;
        for _ in 0..n {
            let feature = r.u64()?;
            if last.is_some_and(|l| l >= feature) {
                return Err(corrupt("embedding ids out of order"));
            }
            last = Some(feature);
            let vector = (0..width).map(|_| r.gaussian()).collect::<Result<Vec<_>, _>>()?;
            table.insert(feature, vector).map_err(|e| corrupt(e.to_string()))?;
        }

        let shapes = config.dense_shapes();
        let total: usize = shapes.iter().map(|(a, b)| a * b).sum();
        if total > r.remaining() / 16 {
            return Err(corrupt("truncated"));
        }
        let mut dense = Vec::with_capacity(shapes.len());
        for (rows, cols) in shapes {
            let weights = (0..rows * cols).map(|_| r.gaussian()).collect::<Result<Vec<_>, _>>()?;
            dense.push(DenseLayerWeights::new(rows, cols, weights).map_err(|e| corrupt(e.to_string()))?);
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Model::from_parts(config, table, dense, counters, sample_rate))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
