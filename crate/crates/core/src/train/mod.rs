//! Supervised training: AdamW, cosine schedule, cross-entropy, top-k
//! evaluation, datasets and checkpoints.

mod config;
mod data;
mod metrics;
mod optim;
mod schedule;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Precision, TrainConfig};
pub use data::{load_idx, synth_dataset, write_idx, LabeledDataset};
pub use metrics::{evaluate, in_top_k, topk_accuracy, EvalMetrics, MetricsLog, CSV_HEADER};
pub use optim::{adamw_step, OptimState};
pub use schedule::lr_at;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::VitModel;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// One metrics row, written after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_top1: f64,
    pub best_epoch: usize,
    pub total_steps: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Where `metrics.csv`, `last.ckpt` and `best.ckpt` go. Nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Evaluated after each epoch; defaults to the training set.
    pub eval: Option<&'a LabeledDataset>,
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size.max(1))
}

fn check_compatible<T: Scalar>(model: &VitModel<T>, data: &LabeledDataset) -> Result<()> {
    let c = model.config();
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.image_size() != c.image_size || data.channels() != c.channels {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{} but the model expects {}x{}x{}",
            data.channels(),
            data.image_size(),
            data.image_size(),
            c.channels,
            c.image_size,
            c.image_size
        )));
    }
    if data.num_classes > c.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model head has {}",
            data.num_classes, c.num_classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy of one batch and its parameter gradients.
pub fn loss_and_grads<T: Scalar>(
    model: &VitModel<T>,
    images: &crate::tensor::Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Vec<crate::tensor::Tensor<T>>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, images)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss became {value}")));
    }
    let grads = g.backward(loss)?;
    Ok((value, grads.for_store(&model.store)))
}

/// Trains `model` in place. The shuffle order comes from `seed + 1` so that
/// it is independent of the initialization stream. On divergence the error
/// is returned and the last completed epoch's checkpoint stays on disk.
pub fn train<T: Scalar>(
    model: &mut VitModel<T>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<History> {
    cfg.validate()?;
    check_compatible(model, data)?;
    let eval_set = opts.eval.unwrap_or(data);
    check_compatible(model, eval_set)?;

    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = per_epoch * cfg.total_epochs;
    let mut log = match &opts.out_dir {
        Some(dir) => Some(MetricsLog::create(dir.join(METRICS_FILE))?),
        None => None,
    };
    let ckpt = |name: &str, m: &VitModel<T>| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            checkpoint::save(m, dir.join(name))?;
        }
        Ok(())
    };

    let mut rng = Rng::seed(cfg.seed.wrapping_add(1));
    let mut state = OptimState::new(&model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History {
        total_steps: total,
        best_top1: f64::NEG_INFINITY,
        ..History::default()
    };
    let mut step = 0;
    for epoch in 0..cfg.total_epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut lr) = (0.0, cfg.lr_max);
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = data.batch::<T>(chunk);
            let (loss, grads) = loss_and_grads(model, &images, &labels).map_err(diverged)?;
            lr = lr_at(step, total, cfg)?;
            adamw_step(&mut model.store, &grads, &mut state, lr, cfg)?;
            loss_sum += loss;
            step += 1;
        }
        let m = evaluate(model, eval_set, cfg.batch_size).map_err(diverged)?;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_sum / per_epoch as f64,
            top1: m.top1,
            top5: m.top5,
        };
        if let Some(log) = log.as_mut() {
            log.append(&record)?;
        }
        ckpt(LAST_CHECKPOINT, model)?;
        if record.top1 > history.best_top1 {
            history.best_top1 = record.top1;
            history.best_epoch = epoch;
            ckpt(BEST_CHECKPOINT, model)?;
        }
        history.epochs.push(record);
    }
    Ok(history)
}

fn diverged(e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Diverged(m),
        other => other,
    }
}

/// Convenience for callers that only need paths.
pub fn artifact_paths(dir: &Path) -> [PathBuf; 3] {
    [
        dir.join(METRICS_FILE),
        dir.join(LAST_CHECKPOINT),
        dir.join(BEST_CHECKPOINT),
    ]
}
