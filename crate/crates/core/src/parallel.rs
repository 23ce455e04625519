//! Simulated parameter-server training.
//!
//! Workers pull a snapshot of the server model, run sequential ADF over
//! their minibatches and send back the ratio posterior / snapshot for
//! every weight they touched, as natural-parameter deltas. The server
//! multiplies each ratio into its current belief.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use log::{debug, warn};
use thiserror::Error;

use crate::data::{negative_sample, BadRate, SparseInstance};
use crate::gaussian::{natural_multiply, Gaussian, NaturalGaussian};
use crate::layers::WeightId;
use crate::model::{Model, ModelError};

#[derive(Debug, Error)]
pub enum ParallelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    BadRate(#[from] BadRate),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageEntry {
    /// Accumulated natural-parameter change over the worker's steps.
    pub delta: NaturalGaussian,
    /// The worker's final local belief.
    pub posterior: Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMessage {
    pub worker_id: usize,
    pub batch_seq: u64,
    /// Server version the snapshot was pulled at.
    pub base_version: u64,
    pub entries: BTreeMap<WeightId, MessageEntry>,
    /// Model updates run by the worker, replays included.
    pub updates: u64,
    pub skipped_weights: u64,
    pub log_z_sum: f64,
    /// Pre-update click probabilities from the first pass, in stream order.
    pub scores: Vec<f64>,
}

impl LikelihoodMessage {
    pub fn empty(worker_id: usize, batch_seq: u64, base_version: u64) -> Self {
        Self {
            worker_id,
            batch_seq,
            base_version,
            entries: BTreeMap::new(),
            updates: 0,
            skipped_weights: 0,
            log_z_sum: 0.0,
            scores: Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.log_z_sum.is_finite() && self.entries.values().all(|e| e.delta.is_finite())
    }
}

/// Runs ADF over `batch` on the snapshot, `replay` passes in a row, and
/// returns the accumulated message. The snapshot is consumed.
///
/// Any failing example drops the whole batch.
pub fn worker_process_batch(
    mut snapshot: Model,
    batch: &[SparseInstance],
    replay: usize,
) -> Result<LikelihoodMessage, ModelError> {
    let mut msg = LikelihoodMessage::empty(0, 0, 0);
    accumulate(&mut snapshot, batch, replay, &mut msg)?;
    Ok(msg)
}

fn accumulate(
    model: &mut Model,
    batch: &[SparseInstance],
    replay: usize,
    msg: &mut LikelihoodMessage,
) -> Result<(), ModelError> {
    for pass in 0..replay {
        for instance in batch {
            let entries = &mut msg.entries;
            let report = model.update_observed(instance, |id, before, after| {
                let (b, a) = (before.to_natural(), after.to_natural());
                let entry = entries.entry(id).or_insert(MessageEntry {
                    delta: NaturalGaussian::ZERO,
                    posterior: after,
                });
                entry.delta.precision += a.precision - b.precision;
                entry.delta.precision_mean += a.precision_mean - b.precision_mean;
                entry.posterior = after;
            })?;
            msg.updates += 1;
            msg.skipped_weights += report.skipped_weights as u64;
            msg.log_z_sum += report.log_z;
            if pass == 0 {
                msg.scores.push(report.click_probability);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerLog {
    pub messages: u64,
    pub clamped: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub applied: usize,
    pub clamped: usize,
    /// True when the server was untouched since the worker's pull and the
    /// worker's beliefs were taken verbatim.
    pub fast_forward: bool,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: Model,
    /// Bumped on every merge or decay.
    pub version: u64,
    pub merge_log: BTreeMap<usize, WorkerLog>,
    pub dropped_messages: u64,
}

impl ServerState {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            version: 0,
            merge_log: BTreeMap::new(),
            dropped_messages: 0,
        }
    }

    pub fn messages_applied(&self) -> u64 {
        self.merge_log.values().map(|l| l.messages).sum()
    }
}

/// Multiplies the message into the server beliefs.
///
/// If nothing merged since the worker pulled, `prior * ratio` is the
/// worker's own posterior and is copied exactly; otherwise the deltas are
/// added in natural parameters with variance clamping. Unknown embeddings
/// start from their prior.
pub fn server_apply(state: &mut ServerState, msg: &LikelihoodMessage) -> MergeReport {
    let mut report = MergeReport {
        fast_forward: msg.base_version == state.version,
        ..MergeReport::default()
    };
    if !msg.is_finite() {
        warn!("dropping non-finite message from worker {}", msg.worker_id);
        state.dropped_messages += 1;
        return report;
    }
    let bounds = state.model.config().bounds;
    for (&id, entry) in &msg.entries {
        let Some(w) = state.model.weight_mut(id) else {
            warn!("message addresses unknown weight {id:?}");
            continue;
        };
        if report.fast_forward {
            *w = entry.posterior;
        } else {
            let merged = natural_multiply(*w, entry.delta, bounds);
            report.clamped += merged.clamped as usize;
            *w = merged.gaussian;
        }
        report.applied += 1;
    }
    state.model.add_updates(msg.updates, msg.skipped_weights);
    state.model.add_clamps(report.clamped as u64);
    let log = state.merge_log.entry(msg.worker_id).or_default();
    log.messages += 1;
    log.clamped += report.clamped as u64;
    state.version += 1;
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Every round all workers pull the same snapshot; messages merge in
    /// worker order. Reproducible.
    Rounds,
    /// Free-running threads, merge order decided by arrival.
    Async,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelConfig {
    pub workers: usize,
    /// Minibatches per message.
    pub sync_cadence: usize,
    /// ADF passes over each minibatch.
    pub replay: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Server-side decay after every this many merged updates.
    pub decay_every: Option<u64>,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            sync_cadence: 1,
            replay: 1,
            batch_size: crate::data::DEFAULT_BATCH_SIZE,
            schedule: Schedule::Rounds,
            decay_every: None,
        }
    }
}

impl ParallelConfig {
    fn validate(&self, shards: usize) -> Result<(), ParallelError> {
        let bad = |m: String| Err(ParallelError::InvalidConfig(m));
        if self.workers == 0 {
            return bad("at least one worker is required".into());
        }
        if shards != self.workers {
            return bad(format!("{} shards for {} workers", shards, self.workers));
        }
        if self.sync_cadence == 0 || self.replay == 0 || self.batch_size == 0 {
            return bad("sync cadence, replay and batch size must be at least 1".into());
        }
        if self.decay_every == Some(0) {
            return bad("decay cadence must be at least 1".into());
        }
        Ok(())
    }
}

/// One merged message (async) or one synchronization round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub messages: usize,
    pub dropped: usize,
    pub clamps: usize,
    pub updates: u64,
    pub log_z_sum: f64,
}

impl RoundReport {
    pub fn mean_log_z(&self) -> f64 {
        if self.updates == 0 {
            0.0
        } else {
            self.log_z_sum / self.updates as f64
        }
    }
}

impl fmt::Display for RoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round={} messages={} dropped={} clamps={} examples={} mean_log_z={:.6}",
            self.round,
            self.messages,
            self.dropped,
            self.clamps,
            self.updates,
            self.mean_log_z()
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub rounds: Vec<RoundReport>,
    pub messages_applied: u64,
    pub dropped_messages: u64,
    /// Progressive-validation scores per worker, in that worker's order.
    pub scores: Vec<Vec<f64>>,
}

impl fmt::Display for TrainingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rounds {
            writeln!(f, "{r}")?;
        }
        write!(
            f,
            "total messages_applied={} dropped={}",
            self.messages_applied, self.dropped_messages
        )
    }
}

/// Splits a stream into `n` disjoint shards by dealing minibatches
/// round-robin.
pub fn deal_shards(stream: &[SparseInstance], n: usize, batch_size: usize) -> Vec<Vec<SparseInstance>> {
    let n = n.max(1);
    let mut shards = vec![Vec::new(); n];
    for (i, batch) in stream.chunks(batch_size.max(1)).enumerate() {
        shards[i % n].extend_from_slice(batch);
    }
    shards
}

/// Worker-set streams for multiple-data training: the same stream
/// negative-sampled once per set with that set's seed, so every set keeps
/// the same positives and a different subset of negatives.
pub fn multiple_data_shards(
    stream: &[SparseInstance],
    rate: f64,
    seeds: &[u64],
) -> Result<Vec<Vec<SparseInstance>>, ParallelError> {
    if seeds.len() < 2 {
        return Err(ParallelError::InvalidConfig("multiple data mode needs at least 2 worker sets".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(ParallelError::InvalidConfig("worker sets need distinct sampling seeds".into()));
    }
    if rate == 1.0 {
        warn!("sample rate 1: all worker sets see the same stream");
    }
    seeds
        .iter()
        .map(|&seed| Ok(negative_sample(stream.iter().cloned(), rate, seed)?.collect()))
        .collect()
}

struct Accumulator {
    state: ServerState,
    report: TrainingReport,
    decay_every: Option<u64>,
    next_decay: u64,
}

impl Accumulator {
    fn new(model: Model, config: &ParallelConfig) -> Self {
        let next_decay = config.decay_every.map_or(u64::MAX, |d| model.update_count() / d * d + d);
        Self {
            state: ServerState::new(model),
            report: TrainingReport {
                scores: vec![Vec::new(); config.workers],
                ..TrainingReport::default()
            },
            decay_every: config.decay_every,
            next_decay,
        }
    }

    fn merge(&mut self, result: Result<LikelihoodMessage, ModelError>, round: &mut RoundReport) {
        match result {
            Ok(msg) => {
                let merge = server_apply(&mut self.state, &msg);
                round.messages += 1;
                round.clamps += merge.clamped;
                round.updates += msg.updates;
                round.log_z_sum += msg.log_z_sum;
                self.report.scores[msg.worker_id].extend_from_slice(&msg.scores);
            }
            Err(e) => {
                warn!("worker batch failed, message dropped: {e}");
                self.state.dropped_messages += 1;
                round.dropped += 1;
            }
        }
        if let Some(every) = self.decay_every {
            if self.state.model.update_count() >= self.next_decay {
                let n = self.state.model.decay_all();
                debug!("decayed {n} variances");
                self.state.version += 1;
                self.next_decay = self.state.model.update_count() / every * every + every;
            }
        }
    }

    fn finish(mut self) -> (Model, TrainingReport) {
        self.report.messages_applied = self.state.messages_applied();
        self.report.dropped_messages = self.state.dropped_messages;
        (self.state.model, self.report)
    }
}

fn run_job(
    mut snapshot: Model,
    job: &[&[SparseInstance]],
    replay: usize,
    worker_id: usize,
    seq: u64,
    version: u64,
) -> Result<LikelihoodMessage, ModelError> {
    let mut msg = LikelihoodMessage::empty(worker_id, seq, version);
    for batch in job {
        accumulate(&mut snapshot, batch, replay, &mut msg)?;
    }
    Ok(msg)
}

/// Trains `model` with one worker per shard and returns the server model.
pub fn run_parallel_training(
    model: Model,
    shards: &[Vec<SparseInstance>],
    config: &ParallelConfig,
) -> Result<(Model, TrainingReport), ParallelError> {
    config.validate(shards.len())?;
    let jobs: Vec<Vec<Vec<&[SparseInstance]>>> = shards
        .iter()
        .map(|s| {
            let batches: Vec<&[SparseInstance]> = s.chunks(config.batch_size).collect();
            batches.chunks(config.sync_cadence).map(|c| c.to_vec()).collect()
        })
        .collect();
    let mut acc = Accumulator::new(model, config);
    match config.schedule {
        Schedule::Rounds => {
            let rounds = jobs.iter().map(Vec::len).max().unwrap_or(0);
            for r in 0..rounds {
                let version = acc.state.version;
                let snapshot = &acc.state.model;
                let active: Vec<usize> = (0..jobs.len()).filter(|&w| r < jobs[w].len()).collect();
                let results: Vec<_> = if active.len() == 1 {
                    let w = active[0];
                    vec![run_job(snapshot.clone(), &jobs[w][r], config.replay, w, r as u64, version)]
                } else {
                    std::thread::scope(|s| {
                        let handles: Vec<_> = active
                            .iter()
                            .map(|&w| {
                                let job = &jobs[w][r];
                                let snap = snapshot.clone();
                                s.spawn(move || run_job(snap, job, config.replay, w, r as u64, version))
                            })
                            .collect();
                        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
                    })
                };
                let mut round = RoundReport {
                    round: r as u64,
                    messages: 0,
                    dropped: 0,
                    clamps: 0,
                    updates: 0,
                    log_z_sum: 0.0,
                };
                for result in results {
                    acc.merge(result, &mut round);
                }
                acc.report.rounds.push(round);
            }
        }
        Schedule::Async => {
            let shared = Mutex::new((acc, 0u64));
            std::thread::scope(|s| {
                for (w, worker_jobs) in jobs.iter().enumerate() {
                    let shared = &shared;
                    s.spawn(move || {
                        for (seq, job) in worker_jobs.iter().enumerate() {
                            let (snapshot, version) = {
                                let guard = shared.lock().expect("server lock");
                                (guard.0.state.model.clone(), guard.0.state.version)
                            };
                            let result = run_job(snapshot, job, config.replay, w, seq as u64, version);
                            let mut guard = shared.lock().expect("server lock");
                            let (acc, counter) = &mut *guard;
                            let mut round = RoundReport {
                                round: *counter,
                                messages: 0,
                                dropped: 0,
                                clamps: 0,
                                updates: 0,
                                log_z_sum: 0.0,
                            };
                            *counter += 1;
                            acc.merge(result, &mut round);
                            acc.report.rounds.push(round);
                        }
                    });
                }
            });
            acc = shared.into_inner().expect("server lock").0;
        }
    }
    Ok(acc.finish())
}
