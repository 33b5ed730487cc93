use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::Result;
use crate::model::VitModel;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
}

/// Whether `label` is among the `k` largest entries of `logits`, ties going
/// to the lower class index.
pub fn in_top_k<T: Scalar>(logits: &[T], label: usize, k: usize) -> bool {
    let y = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > y || (v == y && c < label))
        .count();
    rank < k
}

/// Top-1/top-5 accuracy over row-major `[B, C]` logits.
pub fn topk_accuracy<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> EvalMetrics {
    let mut hits = (0usize, 0usize);
    for (row, &l) in logits.chunks(classes).zip(labels) {
        hits.0 += in_top_k(row, l, 1) as usize;
        hits.1 += in_top_k(row, l, 5) as usize;
    }
    let n = labels.len().max(1) as f64;
    EvalMetrics {
        top1: hits.0 as f64 / n,
        top5: hits.1 as f64 / n,
    }
}

pub fn evaluate<T: Scalar>(
    model: &VitModel<T>,
    data: &LabeledDataset,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let classes = model.config().num_classes;
    let mut logits = Vec::with_capacity(data.len() * classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = data.batch::<T>(chunk);
        logits.extend_from_slice(model.predict(&images)?.data());
    }
    Ok(topk_accuracy(&logits, classes, &data.labels))
}

pub const CSV_HEADER: &str = "epoch,step,lr,loss,top1,top5";

/// Append-only CSV metrics log. Opening truncates; each row is flushed.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        writeln!(file, "{CSV_HEADER}")?;
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &super::EpochRecord) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{:e},{},{},{}",
            row.epoch, row.step, row.lr, row.loss, row.top1, row.top5
        )?;
        self.file.flush()?;
        Ok(())
    }
}
