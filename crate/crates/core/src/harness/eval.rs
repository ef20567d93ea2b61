//! Top-k accuracy.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::Network;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Number of rows whose label is among the `k` largest logits. Ties are
/// broken toward the lower class index.
pub fn count_correct(logits: &Tensor, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let target = row[l];
            let better = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < l))
                .count();
            better < k
        })
        .count()
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Accuracy {
    let n = labels.len().max(1) as f64;
    Accuracy {
        top1: count_correct(logits, labels, 1) as f64 / n,
        top5: count_correct(logits, labels, 5) as f64 / n,
    }
}

/// Evaluation-mode accuracy over the whole split.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<Accuracy> {
    let logits = net.predict(&data.images, 256)?;
    Ok(accuracy_from_logits(&logits, &data.labels))
}
