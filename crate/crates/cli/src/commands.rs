use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use bodl::data::{open_data, parse_unlabeled_line, DataError, InstanceReader};
use bodl::metrics::{auc, calibration_ratio, logloss};
use bodl::parallel::{deal_shards, run_parallel_training, ParallelConfig, ParallelError, Schedule};
use bodl::{EmbeddingOp, Gaussian, Label, Model, ModelConfig, ModelError, SparseInstance};
use log::{info, warn};
use thiserror::Error;

use crate::args::{EvalArgs, InspectArgs, PredictArgs, ScheduleArg, TrainArgs};

// keeps the sampling stream apart from the weight-initialization stream
const SAMPLE_SALT: u64 = 0x5EED_5A3F_1E00_0001;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Corrupt(String),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(e) => CliError::Io(e.to_string()),
            ModelError::CorruptCheckpoint(_) => CliError::Corrupt(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => CliError::Io(e.to_string()),
            parse => CliError::Config(parse.to_string()),
        }
    }
}

impl From<ParallelError> for CliError {
    fn from(e: ParallelError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn read_labeled(path: &Path) -> Result<Vec<SparseInstance>, CliError> {
    let mut reader = InstanceReader::new(open_data(path).map_err(io_err(path))?);
    let rows: Vec<SparseInstance> = reader.by_ref().map(|(_, x)| x).collect();
    if let Some(e) = reader.take_io_error() {
        return Err(io_err(path)(e));
    }
    info!("read {}: {}", path.display(), reader.stats().summary());
    Ok(rows)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn metric(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

fn label_bit(y: Label) -> u8 {
    u8::from(y.is_click())
}

/// Progressive-validation log: prediction records as they happen, a window
/// record every `window` predictions of one worker stream.
struct MetricsLog {
    out: Option<BufWriter<File>>,
    window: usize,
}

impl MetricsLog {
    fn write(&mut self, record: &str) -> io::Result<()> {
        match &mut self.out {
            Some(out) => writeln!(out, "{record}"),
            None => Ok(()),
        }
    }

    fn stream(&mut self, worker: usize, rows: &[SparseInstance], scores: &[f64], w: f64) -> io::Result<()> {
        if self.out.is_none() {
            return Ok(());
        }
        for (i, (x, &p)) in rows.iter().zip(scores).enumerate() {
            let q = bodl::calibrate(p, w).expect("validated rate");
            self.write(&format!(
                "kind=prediction worker={worker} example={} label={} p={p:.6} q={q:.6}",
                i + 1,
                label_bit(x.label)
            ))?;
            if (i + 1) % self.window == 0 || i + 1 == scores.len() {
                let start = i / self.window * self.window;
                self.window_record(worker, start, &rows[start..=i], &scores[start..=i])?;
            }
        }
        Ok(())
    }

    fn window_record(&mut self, worker: usize, start: usize, rows: &[SparseInstance], p: &[f64]) -> io::Result<()> {
        let labels: Vec<Label> = rows.iter().map(|x| x.label).collect();
        self.write(&format!(
            "kind=window worker={worker} first={} examples={} auc={} logloss={}",
            start + 1,
            p.len(),
            metric(auc(p, &labels)),
            metric(logloss(p, &labels))
        ))
    }
}

fn build_model(args: &TrainArgs, rows: &[SparseInstance]) -> Result<Model, CliError> {
    if let Some(path) = &args.model_in {
        let model = Model::load(path)?;
        info!("continuing from {} ({} updates)", path.display(), model.update_count());
        return Ok(model);
    }
    let max_field = rows.iter().flat_map(|x| &x.features).map(|f| f.field as usize).max().unwrap_or(0);
    let num_fields = args.f.unwrap_or(max_field);
    let config = ModelConfig {
        embedding_op: args.op,
        k: args.k,
        num_fields,
        hidden_sizes: args.hidden.clone(),
        prior_variance: args.prior_variance,
        init_seed: args.seed,
        decay_eps: args.decay_eps,
        ..ModelConfig::default()
    };
    Ok(Model::new(config)?)
}

fn check_fields(model: &Model, rows: &[SparseInstance]) -> Result<(), CliError> {
    let config = model.config();
    let uses_fields = config.embedding_op == EmbeddingOp::Ffm
        || (config.embedding_op == EmbeddingOp::Copy && !config.hidden_sizes.is_empty());
    if !uses_fields {
        return Ok(());
    }
    match rows.iter().flat_map(|x| &x.features).find(|f| f.field as usize > config.num_fields) {
        Some(f) => Err(CliError::Config(format!(
            "field {} is outside the model's {} fields",
            f.field, config.num_fields
        ))),
        None => Ok(()),
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    if args.window == 0 {
        return Err(CliError::Config("window must be at least 1".into()));
    }
    if args.decay_every == 0 {
        return Err(CliError::Config("decay cadence must be at least 1".into()));
    }
    let raw = read_labeled(&args.data)?;
    if raw.is_empty() {
        return Err(CliError::Config(format!("{}: no training examples", args.data.display())));
    }
    let mut model = build_model(args, &raw)?;
    check_fields(&model, &raw)?;
    let mut sampler = bodl::data::negative_sample(raw, args.neg_rate, args.seed ^ SAMPLE_SALT)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let rows: Vec<SparseInstance> = sampler.by_ref().collect();
    info!("negative sampling: {}", sampler.stats().summary());
    if args.model_in.is_some() && model.sample_rate() != args.neg_rate {
        warn!("sample rate changes from {} to {}", model.sample_rate(), args.neg_rate);
    }
    model.set_sample_rate(args.neg_rate).map_err(|e| CliError::Config(e.to_string()))?;

    let mut log = MetricsLog {
        out: args.metrics_out.as_deref().map(create).transpose()?,
        window: args.window,
    };
    let metrics_path = args.metrics_out.as_deref().unwrap_or(Path::new("-"));
    let w = model.sample_rate();
    let mut all_scores = Vec::with_capacity(rows.len());
    let mut all_labels = Vec::with_capacity(rows.len());

    if args.workers == 1 && args.replay == 1 {
        let mut scores = Vec::with_capacity(rows.len());
        let mut kept = Vec::with_capacity(rows.len());
        let mut failed = 0u64;
        for x in &rows {
            match model.update(x) {
                Ok(report) => {
                    scores.push(report.click_probability);
                    kept.push(x.clone());
                }
                Err(e) => {
                    warn!("skipping example: {e}");
                    failed += 1;
                }
            }
            if model.config().decay_eps > 0.0 && model.update_count() % args.decay_every == 0 {
                let n = model.decay_all();
                info!("decayed {n} variances after {} updates", model.update_count());
            }
        }
        if failed > 0 {
            warn!("{failed} examples failed to update");
        }
        log.stream(0, &kept, &scores, w).map_err(io_err(metrics_path))?;
        all_labels.extend(kept.iter().map(|x| x.label));
        all_scores = scores;
    } else {
        let config = ParallelConfig {
            workers: args.workers,
            sync_cadence: args.sync_cadence,
            replay: args.replay,
            batch_size: args.batch_size,
            schedule: match args.schedule {
                ScheduleArg::Rounds => Schedule::Rounds,
                ScheduleArg::Async => Schedule::Async,
            },
            decay_every: (model.config().decay_eps > 0.0).then_some(args.decay_every),
        };
        let shards = deal_shards(&rows, args.workers, args.batch_size);
        let (trained, report) = run_parallel_training(model, &shards, &config)?;
        model = trained;
        for r in &report.rounds {
            log.write(&format!("kind=round {r}")).map_err(io_err(metrics_path))?;
        }
        for (wid, (shard, scores)) in shards.iter().zip(&report.scores).enumerate() {
            // dropped messages leave gaps, so scores only line up with a
            // complete shard
            if scores.len() == shard.len() {
                log.stream(wid, shard, scores, w).map_err(io_err(metrics_path))?;
                all_labels.extend(shard.iter().map(|x| x.label));
                all_scores.extend_from_slice(scores);
            } else {
                warn!("worker {wid} dropped batches; its predictions are not logged");
            }
        }
        if report.dropped_messages > 0 {
            warn!("{} messages dropped", report.dropped_messages);
        }
    }

    let summary = format!(
        "kind=summary examples={} updates={} auc={} logloss={} clamps={} skipped_weights={}",
        all_scores.len(),
        model.update_count(),
        metric(auc(&all_scores, &all_labels)),
        metric(logloss(&all_scores, &all_labels)),
        model.clamp_count(),
        model.skip_count()
    );
    log.write(&summary).map_err(io_err(metrics_path))?;
    if let Some(out) = &mut log.out {
        out.flush().map_err(io_err(metrics_path))?;
    }
    model.save(&args.model_out)?;
    println!("{summary}");
    Ok(())
}

pub fn evaluate(args: &EvalArgs) -> Result<(), CliError> {
    let model = Model::load(&args.model_in)?;
    let rows = read_labeled(&args.data)?;
    if rows.is_empty() {
        return Err(CliError::Config(format!("{}: no labeled examples", args.data.display())));
    }
    let mut q = Vec::with_capacity(rows.len());
    for x in &rows {
        q.push(if args.no_calibrate { model.predict(x)? } else { model.predict_calibrated(x)? });
    }
    let labels: Vec<Label> = rows.iter().map(|x| x.label).collect();
    let record = format!(
        "examples={} auc={} logloss={} calibration_ratio={}",
        rows.len(),
        metric(auc(&q, &labels)),
        metric(logloss(&q, &labels)),
        metric(calibration_ratio(&q, &labels))
    );
    if let Some(path) = &args.metrics_out {
        let mut out = create(path)?;
        writeln!(out, "{record}").and_then(|_| out.flush()).map_err(io_err(path))?;
    }
    println!("{record}");
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let model = Model::load(&args.model_in)?;
    let input = open_data(&args.data).map_err(io_err(&args.data))?;
    let out_path = args.out.as_deref().unwrap_or(Path::new("-"));
    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(io_err(&args.data))?;
        let x = parse_unlabeled_line(&line, i + 1)?;
        let p = if args.no_calibrate { model.predict(&x)? } else { model.predict_calibrated(&x)? };
        writeln!(out, "{p:.6}").map_err(io_err(out_path))?;
    }
    out.flush().map_err(io_err(out_path))?;
    Ok(())
}

fn spread(mut v: Vec<f64>) -> String {
    if v.is_empty() {
        return "weights=0".into();
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    format!("weights={n} min={:.6e} median={:.6e} max={:.6e}", v[0], median, v[n - 1])
}

pub fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    let model = Model::load(&args.model_in)?;
    let c = model.config();
    let hidden: Vec<String> = c.hidden_sizes.iter().map(usize::to_string).collect();
    println!(
        "op={} k={} fields={} hidden={} prior_variance={} decay_eps={} sample_rate={}",
        c.embedding_op,
        c.k,
        c.num_fields,
        if hidden.is_empty() { "none".into() } else { hidden.join(",") },
        c.prior_variance,
        c.decay_eps,
        model.sample_rate()
    );
    let table = model.embedding();
    println!(
        "embedding features={} width={} weights={}",
        table.len(),
        table.width(),
        table.len() * table.width()
    );
    for (l, layer) in model.dense_layers().iter().enumerate() {
        println!(
            "dense layer={} rows={} cols={} weights={}",
            l,
            layer.rows(),
            layer.cols(),
            layer.weights().len()
        );
    }
    println!("dense total_weights={}", c.dense_weight_count());
    let variances = |g: &[Gaussian]| g.iter().map(|g| g.variance()).collect::<Vec<_>>();
    let embedding: Vec<f64> = table.iter().flat_map(|(_, v)| variances(v)).collect();
    println!("variance layer=embedding {}", spread(embedding));
    for (l, layer) in model.dense_layers().iter().enumerate() {
        println!("variance layer=dense{l} {}", spread(variances(layer.weights())));
    }
    println!(
        "counters updates={} skipped_weights={} clamps={}",
        model.update_count(),
        model.skip_count(),
        model.clamp_count()
    );
    Ok(())
}
