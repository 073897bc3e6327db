//! Training loop, evaluation and metrics.
//!
//! The graph is built once over every flow of the bundle; training and
//! evaluation touch only the flows of their split (transductive masking).
//! Labels never enter a forward pass, so labels outside the training split
//! cannot leak into the model.

mod metrics;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{class_weights, Bundle, FlowTable};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{forward, ForwardOptions, GraphContext, ModelState, DEFAULT_LINE_GRAPH_BUDGET};
use crate::sampler::{mix_seed, BatchKey, SampleConfig};

pub use metrics::{parse_report_header, precision_recall_f1, weighted_f1, ClassMetrics, EvalReport};
pub use optim::{clip_global_norm, Adam};

/// Batch key epoch used for evaluation passes.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "binary")]
    Binary,
    #[serde(rename = "multi")]
    Multiclass,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multiclass => "multi",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multi" | "multiclass" => Ok(Task::Multiclass),
            _ => Err(Error::Config(format!("unknown task {s:?}; expected binary or multi"))),
        }
    }
}

/// Streams split off the run seed.
#[derive(Clone, Copy, Debug)]
pub enum SeedStream {
    Init = 1,
    Shuffle = 2,
    Sample = 3,
    Padding = 4,
    Split = 5,
}

pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    mix_seed(&[seed, stream as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub task: Task,
    pub class_weighted: bool,
    pub clip_norm: f64,
    pub sample_sizes: Vec<usize>,
    /// Threads for evaluation; results do not depend on it.
    pub eval_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 500,
            lr: 0.007,
            seed: 0,
            task: Task::Binary,
            class_weighted: false,
            clip_norm: 5.0,
            sample_sizes: vec![8, 8],
            eval_workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if self.eval_workers == 0 {
            return Err(Error::Config("eval_workers must be at least 1".into()));
        }
        SampleConfig {
            sizes: self.sample_sizes.clone(),
            seed: 0,
        }
        .validate()
    }

    pub fn sample(&self) -> SampleConfig {
        SampleConfig {
            sizes: self.sample_sizes.clone(),
            seed: derive_seed(self.seed, SeedStream::Sample),
        }
    }
}

/// One graph over all flows plus labels and split membership.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ctx: GraphContext,
    pub label_binary: Vec<usize>,
    pub label_class: Vec<usize>,
    pub class_names: Vec<String>,
    /// Flow indices of train, validation and test.
    pub splits: [Vec<usize>; 3],
}

impl Dataset {
    pub fn from_bundle(bundle: &Bundle, window: usize, pad_seed: u64, budget: u64) -> Result<Self> {
        Self::from_splits_within(bundle.splits(), bundle.meta.class_names.clone(), window, pad_seed, budget)
    }

    pub fn from_splits(parts: [&FlowTable; 3], class_names: Vec<String>, window: usize, pad_seed: u64) -> Result<Self> {
        Self::from_splits_within(parts, class_names, window, pad_seed, DEFAULT_LINE_GRAPH_BUDGET)
    }

    /// Like [`Dataset::from_splits`] with an explicit line-graph edge budget.
    pub fn from_splits_within(
        parts: [&FlowTable; 3],
        class_names: Vec<String>,
        window: usize,
        pad_seed: u64,
        budget: u64,
    ) -> Result<Self> {
        let all = FlowTable::concat(&parts)?;
        let ctx = GraphContext::build_within(&all, window, pad_seed, budget)?;
        let mut start = 0;
        let splits = parts.map(|p| {
            let idx = (start..start + p.len()).collect();
            start += p.len();
            idx
        });
        Ok(Dataset {
            ctx,
            label_binary: all.label_binary,
            label_class: all.label_class,
            class_names,
            splits,
        })
    }

    pub fn labels(&self, task: Task) -> &[usize] {
        match task {
            Task::Binary => &self.label_binary,
            Task::Multiclass => &self.label_class,
        }
    }

    pub fn task_classes(&self, task: Task) -> Vec<String> {
        match task {
            Task::Binary => vec!["Normal".into(), "Attack".into()],
            Task::Multiclass => self.class_names.clone(),
        }
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.splits[0]),
            "val" => Ok(&self.splits[1]),
            "test" => Ok(&self.splits[2]),
            _ => Err(Error::Usage(format!("unknown split {name:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 when no epoch ran).
    pub best_epoch: usize,
}

impl History {
    /// Tab-separated, one header line then one line per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_weighted_f1\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}", r.epoch, r.train_loss, r.val_weighted_f1);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::data(Some(i + 1), format!("malformed history line {line:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                val_weighted_f1: f[2].parse().map_err(|_| bad())?,
            });
        }
        let best_epoch = best_of(&records);
        Ok(History { records, best_epoch })
    }
}

/// Highest validation F1; ties go to the later epoch.
fn best_of(records: &[EpochRecord]) -> usize {
    records
        .iter()
        .fold(None::<&EpochRecord>, |best, r| match best {
            Some(b) if b.val_weighted_f1 > r.val_weighted_f1 => Some(b),
            _ => Some(r),
        })
        .map_or(0, |r| r.epoch)
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub history: History,
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients(
    state: &ModelState,
    ds: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    key: BatchKey,
    weights: Option<&[f64]>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let params = state.bind(&mut tape, true);
    let opts = ForwardOptions {
        train: true,
        sample: cfg.sample(),
        key,
        ..Default::default()
    };
    let out = forward(&mut tape, state, &params, &ds.ctx, batch, &opts)?;
    let labels: Vec<usize> = batch.iter().map(|&i| ds.labels(cfg.task)[i]).collect();
    let loss = tape.cross_entropy(out.logits, &labels, weights)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    let grads = params.0.iter().map(|(n, &v)| (n.clone(), tape.grad_or_zeros(v))).collect();
    Ok((value, grads))
}

/// Trains `state` and returns the parameters of the best validation epoch.
pub fn train(mut state: ModelState, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = ds.task_classes(cfg.task).len();
    if state.config.num_classes != classes {
        return Err(Error::Config(format!(
            "model has {} outputs but the {} task has {classes} classes",
            state.config.num_classes,
            cfg.task.tag()
        )));
    }
    let train_idx = &ds.splits[0];
    if train_idx.is_empty() {
        return Err(Error::data(None, "training split is empty"));
    }
    let weights = cfg.class_weighted.then(|| {
        let labels: Vec<usize> = train_idx.iter().map(|&i| ds.labels(cfg.task)[i]).collect();
        class_weights(&labels, classes)
    });
    let mut adam = Adam::new(cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedStream::Shuffle));
    let mut history = History::default();
    let mut best = state.clone();
    let mut order = train_idx.clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let key = BatchKey {
                epoch: epoch as u64,
                batch: b as u64,
            };
            let diverged = |detail: String, state: &ModelState| divergence(state, &format!("epoch {epoch} batch {b}"), &detail);
            let (loss, mut grads) = match batch_gradients(&state, ds, batch, cfg, key, weights.as_deref()) {
                Ok(r) => r,
                Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in {op}"), &state)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}"), &state));
            }
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm {norm}"), &state));
            }
            adam.step(&mut state, &grads)?;
            if !state.is_finite() {
                return Err(diverged("parameters became non-finite".into(), &state));
            }
            loss_sum += loss * batch.len() as f64;
        }
        let val_f1 = if ds.splits[1].is_empty() {
            0.0
        } else {
            match evaluate(&state, ds, &ds.splits[1], cfg) {
                Ok(r) => r.weighted_f1,
                Err(Error::NonFinite { op }) => {
                    return Err(divergence(&state, &format!("epoch {epoch} validation"), &format!("non-finite value in {op}")))
                }
                Err(e) => return Err(e),
            }
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_weighted_f1: val_f1,
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}, val weighted F1 {:.4}",
            record.train_loss,
            record.val_weighted_f1
        );
        history.records.push(record);
        if best_of(&history.records) == epoch {
            best = state.clone();
        }
    }
    history.best_epoch = best_of(&history.records);
    Ok(TrainOutcome { state: best, history })
}

/// Divergence error naming where it happened and the five largest
/// parameter norms.
fn divergence(state: &ModelState, at: &str, detail: &str) -> Error {
    let mut norms = state.norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.4e}")).collect();
    Error::Divergence(format!("{at}: {detail}; largest parameter norms: {}", top.join(", ")))
}

/// Argmax per row; ties go to the lower class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits.row(i).iter().enumerate().fold(0, |best, (j, &v)| if v > logits.row(i)[best] { j } else { best })
        })
        .collect()
}

/// Predicted classes for `flows`, in order. Batches are independent, so
/// the result does not depend on `cfg.eval_workers`.
pub fn predict(state: &ModelState, ds: &Dataset, flows: &[usize], cfg: &TrainConfig) -> Result<Vec<usize>> {
    let run = |(b, batch): (usize, &[usize])| -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let params = state.bind(&mut tape, false);
        let opts = ForwardOptions {
            sample: cfg.sample(),
            key: BatchKey {
                epoch: EVAL_EPOCH,
                batch: b as u64,
            },
            ..Default::default()
        };
        let out = forward(&mut tape, state, &params, &ds.ctx, batch, &opts)?;
        Ok(argmax_rows(tape.value(out.logits)))
    };
    let batches: Vec<(usize, &[usize])> = flows.chunks(cfg.batch_size.max(1)).enumerate().collect();
    let per_batch: Vec<Vec<usize>> = if cfg.eval_workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.eval_workers)
            .build()
            .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
        pool.install(|| batches.into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        batches.into_iter().map(run).collect::<Result<_>>()?
    };
    Ok(per_batch.concat())
}

pub fn evaluate(state: &ModelState, ds: &Dataset, flows: &[usize], cfg: &TrainConfig) -> Result<EvalReport> {
    let predicted = if flows.is_empty() { Vec::new() } else { predict(state, ds, flows, cfg)? };
    let truth: Vec<usize> = flows.iter().map(|&i| ds.labels(cfg.task)[i]).collect();
    EvalReport::from_predictions(&truth, &predicted, &ds.task_classes(cfg.task))
}
