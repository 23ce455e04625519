//! Instance format, stream reading, negative sampling and minibatching.
//!
//! One instance per line: `LABEL FIELD:FEATURE [FIELD:FEATURE ...]`, with
//! label `1` for a click and `0` or `-1` for a non-click. Files ending in
//! `.gz` are decompressed on the fly.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Click,
    NoClick,
}

impl Label {
    /// `+1` or `-1`.
    pub fn sign(self) -> f64 {
        match self {
            Label::Click => 1.0,
            Label::NoClick => -1.0,
        }
    }

    pub fn is_click(self) -> bool {
        self == Label::Click
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Click => Label::NoClick,
            Label::NoClick => Label::Click,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Feature {
    /// 1-based field id.
    pub field: u32,
    pub id: u64,
}

impl Feature {
    pub fn new(field: u32, id: u64) -> Self {
        Self { field, id }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseInstance {
    pub label: Label,
    pub features: Vec<Feature>,
}

impl SparseInstance {
    pub fn new(label: Label, features: Vec<Feature>) -> Self {
        Self { label, features }
    }

    /// Canonical text form, order preserving.
    pub fn to_line(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SparseInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.label.is_click() { "1" } else { "0" })?;
        for feat in &self.features {
            write!(f, " {}:{}", feat.field, feat.id)?;
        }
        Ok(())
    }
}

fn parse_feature(token: &str, line: usize) -> Result<Feature, DataError> {
    let err = |message: String| DataError::Parse { line, message };
    let (field, id) = token
        .split_once(':')
        .ok_or_else(|| err(format!("expected FIELD:FEATURE, got `{token}`")))?;
    let field: u32 = field
        .parse()
        .map_err(|_| err(format!("bad field id in `{token}`")))?;
    if field == 0 {
        return Err(err(format!("field ids start at 1, got `{token}`")));
    }
    let id: u64 = id
        .parse()
        .map_err(|_| err(format!("bad feature id in `{token}`")))?;
    Ok(Feature::new(field, id))
}

fn parse_features<'a>(
    tokens: impl Iterator<Item = &'a str>,
    line: usize,
) -> Result<Vec<Feature>, DataError> {
    let mut seen = HashSet::new();
    let mut features = Vec::new();
    for token in tokens {
        let feature = parse_feature(token, line)?;
        if !seen.insert(feature.id) {
            return Err(DataError::Parse {
                line,
                message: format!("duplicate feature {}", feature.id),
            });
        }
        features.push(feature);
    }
    if features.is_empty() {
        return Err(DataError::Parse {
            line,
            message: "instance has no features".into(),
        });
    }
    Ok(features)
}

/// Parses one labeled line. `line` is the 1-based line number used in errors.
pub fn parse_line(text: &str, line: usize) -> Result<SparseInstance, DataError> {
    let mut tokens = text.split_whitespace();
    let label = match tokens.next() {
        Some("1") | Some("+1") => Label::Click,
        Some("0") | Some("-1") => Label::NoClick,
        Some(other) => {
            return Err(DataError::Parse {
                line,
                message: format!("bad label `{other}`"),
            })
        }
        None => {
            return Err(DataError::Parse {
                line,
                message: "empty line".into(),
            })
        }
    };
    Ok(SparseInstance::new(label, parse_features(tokens, line)?))
}

/// Parses a line that may omit the label (scoring input). Unlabeled lines
/// come back as non-clicks.
pub fn parse_unlabeled_line(text: &str, line: usize) -> Result<SparseInstance, DataError> {
    match text.split_whitespace().next() {
        Some(first) if first.contains(':') => Ok(SparseInstance::new(
            Label::NoClick,
            parse_features(text.split_whitespace(), line)?,
        )),
        _ => parse_line(text, line),
    }
}

/// Reader counters. `negatives_kept + negatives_dropped` is the number of
/// negatives read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StreamStats {
    pub examples_read: u64,
    pub positives: u64,
    pub negatives_kept: u64,
    pub negatives_dropped: u64,
    pub parse_errors: u64,
}

impl StreamStats {
    pub fn merge(&mut self, other: &StreamStats) {
        self.examples_read += other.examples_read;
        self.positives += other.positives;
        self.negatives_kept += other.negatives_kept;
        self.negatives_dropped += other.negatives_dropped;
        self.parse_errors += other.parse_errors;
    }

    /// Single-line JSON summary.
    pub fn summary(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// Opens a data file, decompressing `.gz` by extension.
pub fn open_data(path: &Path) -> io::Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(flate2::read::MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Streams instances from text, skipping and counting bad lines.
///
/// Yields `(line_number, instance)` in file order. I/O errors end the
/// stream and are kept in [`InstanceReader::io_error`].
pub struct InstanceReader<R> {
    lines: io::Lines<R>,
    line: usize,
    labeled: bool,
    stats: StreamStats,
    io_error: Option<io::Error>,
}

impl<R: BufRead> InstanceReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
            labeled: true,
            stats: StreamStats::default(),
            io_error: None,
        }
    }

    /// Accept lines without a label.
    pub fn unlabeled(mut self) -> Self {
        self.labeled = false;
        self
    }

    pub fn stats(&self) -> &StreamStats {
        &self.stats
    }

    pub fn io_error(&self) -> Option<&io::Error> {
        self.io_error.as_ref()
    }

    pub fn take_io_error(&mut self) -> Option<io::Error> {
        self.io_error.take()
    }
}

impl<R: BufRead> Iterator for InstanceReader<R> {
    type Item = (usize, SparseInstance);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(text) => text,
                Err(e) => {
                    self.io_error = Some(e);
                    return None;
                }
            };
            self.line += 1;
            let parsed = if self.labeled {
                parse_line(&text, self.line)
            } else {
                parse_unlabeled_line(&text, self.line)
            };
            match parsed {
                Ok(instance) => {
                    self.stats.examples_read += 1;
                    if instance.label.is_click() {
                        self.stats.positives += 1;
                    } else {
                        self.stats.negatives_kept += 1;
                    }
                    return Some((self.line, instance));
                }
                Err(e) => {
                    log::warn!("skipping bad record: {e}");
                    self.stats.parse_errors += 1;
                }
            }
        }
    }
}

/// Reads every instance of a file into memory.
pub fn read_instances(path: &Path) -> Result<(Vec<SparseInstance>, StreamStats), DataError> {
    let mut reader = InstanceReader::new(open_data(path)?);
    let instances: Vec<SparseInstance> = reader.by_ref().map(|(_, inst)| inst).collect();
    if let Some(e) = reader.take_io_error() {
        return Err(e.into());
    }
    Ok((instances, *reader.stats()))
}

#[derive(Debug, Error, PartialEq)]
#[error("sample rate {0} is outside (0, 1]")]
pub struct BadRate(pub f64);

pub fn check_rate(w: f64) -> Result<f64, BadRate> {
    if w > 0.0 && w <= 1.0 {
        Ok(w)
    } else {
        Err(BadRate(w))
    }
}

/// Keeps every positive and each negative with probability `rate`.
pub struct NegativeSampler<I> {
    inner: I,
    rate: f64,
    rng: ChaCha8Rng,
    stats: StreamStats,
}

impl<I> NegativeSampler<I> {
    pub fn stats(&self) -> &StreamStats {
        &self.stats
    }
}

impl<I: Iterator<Item = SparseInstance>> Iterator for NegativeSampler<I> {
    type Item = SparseInstance;

    fn next(&mut self) -> Option<SparseInstance> {
        loop {
            let instance = self.inner.next()?;
            self.stats.examples_read += 1;
            if instance.label.is_click() {
                self.stats.positives += 1;
                return Some(instance);
            }
            // w = 1 keeps everything without consuming randomness
            if self.rate >= 1.0 || self.rng.random::<f64>() < self.rate {
                self.stats.negatives_kept += 1;
                return Some(instance);
            }
            self.stats.negatives_dropped += 1;
        }
    }
}

pub fn negative_sample<I>(stream: I, rate: f64, seed: u64) -> Result<NegativeSampler<I::IntoIter>, BadRate>
where
    I: IntoIterator<Item = SparseInstance>,
{
    Ok(NegativeSampler {
        inner: stream.into_iter(),
        rate: check_rate(rate)?,
        rng: ChaCha8Rng::seed_from_u64(seed),
        stats: StreamStats::default(),
    })
}

/// Sample rate that brings a stream with click rate `ctr` to the given
/// positive:negative ratio.
pub fn sample_rate_for_ratio(ctr: f64, ratio: f64) -> f64 {
    (ctr / (ratio * (1.0 - ctr))).min(1.0)
}

/// Splits a stream into consecutive batches of `size`; the last may be short.
pub struct Minibatches<I> {
    inner: I,
    size: usize,
}

impl<I: Iterator> Iterator for Minibatches<I> {
    type Item = Vec<I::Item>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch: Vec<I::Item> = self.inner.by_ref().take(self.size).collect();
        (!batch.is_empty()).then_some(batch)
    }
}

pub fn minibatch<I: IntoIterator>(stream: I, size: usize) -> Minibatches<I::IntoIter> {
    assert!(size >= 1, "minibatch size must be at least 1");
    Minibatches {
        inner: stream.into_iter(),
        size,
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 256;
