//! Training, evaluation and aggregator comparison.
//!
//! A run writes into `output_dir`:
//!
//! - `metrics.jsonl`: one [`MetricsRecord`] per line (train and valid per
//!   epoch, then test for the best epoch). Only deterministic fields are
//!   written, so identical configs give byte-identical files.
//! - `timing.jsonl`: wall-clock seconds and steps/second per epoch.
//! - `best.ckpt`: parameters at the best validation accuracy.
//!
//! Randomness: the dataset comes from `task.seed`. A second ChaCha8 stream
//! seeded with `seed` first initialises the parameters, then draws one
//! shuffle of the training set per epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Aggregator;
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, cross_entropy, Batch, Encoder};
use crate::optim::Adam;
use crate::tape::Tape;
use crate::tasks::{generate, write_examples, Dataset, Example, Split, TaskKind};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const BAD_BATCH_FILE: &str = "nonfinite_batch.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    /// Mean cross-entropy per example.
    pub loss: f64,
    pub accuracy: f64,
    pub param_count: usize,
    /// Seconds since training started; kept out of `metrics.jsonl`.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TimingRecord {
    epoch: usize,
    wall_clock_seconds: f64,
    steps_per_second: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Every record written to `metrics.jsonl`, in order.
    pub history: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_valid: MetricsRecord,
    pub test: MetricsRecord,
    pub param_count: usize,
    /// Median over all optimisation steps.
    pub steps_per_second: f64,
    pub checkpoint: PathBuf,
    /// Parameters at the best validation epoch.
    pub model: Encoder,
}

impl TrainOutcome {
    /// Mean training loss of epoch `e` (1-based).
    pub fn train_loss(&self, e: usize) -> Option<f64> {
        self.history.iter().find(|r| r.epoch == e && r.split == Split::Train).map(|r| r.loss)
    }
}

/// Generates the dataset and trains.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = generate(&cfg.task)?;
    train_on(cfg, &data, &mut |_| {})
}

/// Trains on an already generated dataset, calling `progress` after each
/// record is written.
pub fn train_on(cfg: &ExperimentConfig, data: &Dataset, progress: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Encoder::new(cfg.model.clone(), cfg.dims(), &mut rng)?;
    let param_count = model.param_count();
    let mut adam = Adam::new(cfg.optimizer.clone(), &model.params);

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut metrics = BufWriter::new(File::create(cfg.output_dir.join(METRICS_FILE))?);
    let mut timing = BufWriter::new(File::create(cfg.output_dir.join(TIMING_FILE))?);
    let ckpt_path = cfg.output_dir.join(CHECKPOINT_FILE);

    let mut history = Vec::new();
    let mut emit = |rec: MetricsRecord, history: &mut Vec<MetricsRecord>, metrics: &mut BufWriter<File>| -> Result<()> {
        writeln!(metrics, "{}", serde_json::to_string(&rec).expect("record serialises"))?;
        metrics.flush()?;
        progress(&rec);
        history.push(rec);
        Ok(())
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step_times = Vec::new();
    let mut best: Option<(MetricsRecord, Encoder)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_start = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::from_examples(&examples)?;
            let t0 = Instant::now();
            let (loss, hits) = match train_step(&mut model, &mut adam, &batch) {
                Err(e @ Error::Numeric { .. }) => return Err(dump_bad_batch(cfg, epoch, &examples, e)),
                other => other?,
            };
            step_times.push(t0.elapsed().as_secs_f64());
            loss_sum += loss * batch.rows as f64;
            correct += hits;
        }
        let n = data.train.len() as f64;
        let elapsed = start.elapsed().as_secs_f64();
        let train_rec = MetricsRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            param_count,
            wall_clock_seconds: elapsed,
        };
        emit(train_rec, &mut history, &mut metrics)?;

        let (loss, accuracy) = evaluate_examples(&model, &data.valid, cfg.batch_size)?;
        let valid_rec = MetricsRecord {
            epoch,
            split: Split::Valid,
            loss,
            accuracy,
            param_count,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        let epoch_steps = order.len().div_ceil(cfg.batch_size) as f64;
        let t = TimingRecord {
            epoch,
            wall_clock_seconds: valid_rec.wall_clock_seconds,
            steps_per_second: epoch_steps / epoch_start.elapsed().as_secs_f64(),
        };
        writeln!(timing, "{}", serde_json::to_string(&t).expect("timing serialises"))?;
        timing.flush()?;

        let improved = best.as_ref().is_none_or(|(b, _)| valid_rec.accuracy > b.accuracy);
        if improved {
            let meta = CheckpointMeta { epoch, config: cfg.clone() };
            checkpoint::save(&ckpt_path, &serde_json::to_string(&meta).expect("meta serialises"), &model.params)?;
            best = Some((valid_rec.clone(), model.clone()));
        }
        let reached = cfg.target_valid_accuracy.is_some_and(|t| valid_rec.accuracy >= t);
        emit(valid_rec, &mut history, &mut metrics)?;
        if reached {
            break;
        }
    }

    let (best_valid, model) = best.expect("at least one epoch");
    let (loss, accuracy) = evaluate_examples(&model, &data.test, cfg.batch_size)?;
    let test = MetricsRecord {
        epoch: best_valid.epoch,
        split: Split::Test,
        loss,
        accuracy,
        param_count,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    emit(test.clone(), &mut history, &mut metrics)?;
    Ok(TrainOutcome {
        history,
        best_epoch: best_valid.epoch,
        best_valid,
        test,
        param_count,
        steps_per_second: 1.0 / median(&mut step_times),
        checkpoint: ckpt_path,
        model,
    })
}

/// One Adam step; returns the batch loss and the number of correct
/// predictions made before the update.
fn train_step(model: &mut Encoder, adam: &mut Adam, batch: &Batch) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let logits = model.logits(&mut tape, &bound, batch)?;
    let loss = cross_entropy(&mut tape, logits, &batch.labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::numeric("train", format!("loss is {value}")));
    }
    let hits = count_hits(tape.value(logits), &batch.labels);
    tape.backward(loss)?;
    let grads: Vec<_> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
    adam.step(&mut model.params, &grads)?;
    Ok((value, hits))
}

fn count_hits(logits: &crate::tensor::Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn dump_bad_batch(cfg: &ExperimentConfig, epoch: usize, examples: &[&Example], err: Error) -> Error {
    let path = cfg.output_dir.join(BAD_BATCH_FILE);
    let owned: Vec<Example> = examples.iter().map(|&e| e.clone()).collect();
    let note = match write_examples(&path, &owned) {
        Ok(()) => format!("offending batch written to {}", path.display()),
        Err(w) => format!("could not write offending batch: {w}"),
    };
    match err {
        Error::Numeric { op, detail } => Error::Numeric { op, detail: format!("{detail} (epoch {epoch}; {note})") },
        other => other,
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Mean loss and accuracy of `model` over `examples`, in order, in batches
/// of `batch_size`.
pub fn evaluate_examples(model: &Encoder, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs)?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let logits = model.logits(&mut tape, &bound, &batch)?;
        let loss = cross_entropy(&mut tape, logits, &batch.labels)?;
        loss_sum += tape.value(loss).item() * batch.rows as f64;
        correct += count_hits(tape.value(logits), &batch.labels);
    }
    let n = examples.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Model and config stored in a checkpoint written by [`train_on`].
pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, usize, Encoder)> {
    let (meta, params) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    let cfg = meta.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Encoder::new(cfg.model.clone(), cfg.dims(), &mut rng)?;
    model.load_params(params)?;
    Ok((cfg, meta.epoch, model))
}

/// Reloads a checkpoint, regenerates its dataset and scores one split.
pub fn evaluate(checkpoint: &Path, split: Split) -> Result<MetricsRecord> {
    let start = Instant::now();
    let (cfg, epoch, model) = load_checkpoint(checkpoint)?;
    let data = generate(&cfg.task)?;
    let (loss, accuracy) = evaluate_examples(&model, data.split(split), cfg.batch_size)?;
    Ok(MetricsRecord {
        epoch,
        split,
        loss,
        accuracy,
        param_count: model.param_count(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// One trained configuration in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub task: TaskKind,
    pub aggregators: Vec<Aggregator>,
    pub test_accuracy: f64,
    pub param_count: usize,
    pub steps_per_second: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

const HEADER: [&str; 6] = ["name", "task", "aggregators", "test_accuracy", "param_count", "steps_per_second"];

impl Comparison {
    fn cells(&self) -> Vec<[String; 6]> {
        self.rows
            .iter()
            .map(|r| {
                let aggs: Vec<&str> = r.aggregators.iter().map(|a| a.as_str()).collect();
                [
                    r.name.clone(),
                    r.task.to_string(),
                    aggs.join("+"),
                    format!("{:.4}", r.test_accuracy),
                    r.param_count.to_string(),
                    format!("{:.2}", r.steps_per_second),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = HEADER.join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Column-aligned text; numeric columns are right-aligned.
    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let mut widths = HEADER.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| if i < 3 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
                .collect();
            parts.join("  ").trim_end().to_owned() + "\n"
        };
        let header: Vec<String> = HEADER.iter().map(|s| s.to_string()).collect();
        let mut out = line(&header);
        for row in &cells {
            out.push_str(&line(row));
        }
        out
    }
}

/// Configs must share the task (including its seed) and the training seed.
pub fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    let first = configs.first().ok_or_else(|| Error::Config("compare needs at least one config".into()))?;
    for c in &configs[1..] {
        if c.task != first.task {
            return Err(Error::Config(format!("config {} uses a different task than {}", c.name, first.name)));
        }
        if c.seed != first.seed {
            return Err(Error::Config(format!("config {} uses seed {} but {} uses {}", c.name, c.seed, first.name, first.seed)));
        }
    }
    Ok(())
}

/// Trains every config on one shared dataset and tabulates the results.
pub fn compare(configs: &[ExperimentConfig], progress: &mut dyn FnMut(&str, &MetricsRecord)) -> Result<Comparison> {
    check_comparable(configs)?;
    let data = generate(&configs[0].task)?;
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let out = train_on(c, &data, &mut |r| progress(&c.name, r))?;
        rows.push(ComparisonRow {
            name: c.name.clone(),
            task: c.task.kind,
            aggregators: c.model.aggregators.clone(),
            test_accuracy: out.test.accuracy,
            param_count: out.param_count,
            steps_per_second: out.steps_per_second,
        });
    }
    Ok(Comparison { rows })
}
