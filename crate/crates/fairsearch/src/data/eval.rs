//! Evaluation metrics: overall accuracy, per-class accuracy (recall), and
//! balanced accuracy (mean per-class recall).

use super::{batch_images, ChannelStats, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub overall: f64,
    /// Per-class recall; NaN for classes absent from the dataset.
    pub per_class: Vec<f64>,
    /// Mean per-class recall over classes present in the dataset.
    pub balanced: f64,
}

/// Evaluate a logits function over a dataset in fixed index order.
pub fn evaluate<T, F>(
    dataset: &LabeledDataset,
    stats: &ChannelStats,
    batch_size: usize,
    mut logits_fn: F,
) -> Result<EvalMetrics>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    if dataset.is_empty() {
        return Err(Error::InvalidArg("evaluate: empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArg("evaluate: zero batch size".into()));
    }
    let c = dataset.num_classes();
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for batch in indices.chunks(batch_size) {
        let images = batch_images::<T>(dataset, batch, stats);
        let logits = logits_fn(&images)?;
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != batch.len() || shape[1] != c {
            return Err(Error::ShapeMismatch(format!(
                "evaluate: logits shape {shape:?}, expected [{}, {c}]",
                batch.len()
            )));
        }
        for (row, &idx) in batch.iter().enumerate() {
            let logit_row = &logits.data()[row * c..(row + 1) * c];
            let mut best = 0;
            for (j, v) in logit_row.iter().enumerate().skip(1) {
                if *v > logit_row[best] {
                    best = j;
                }
            }
            let label = dataset.label(idx);
            total[label] += 1;
            if best == label {
                correct[label] += 1;
            }
        }
    }
    let overall = correct.iter().sum::<usize>() as f64 / dataset.len() as f64;
    let per_class: Vec<f64> = correct
        .iter()
        .zip(total.iter())
        .map(|(&c, &t)| if t > 0 { c as f64 / t as f64 } else { f64::NAN })
        .collect();
    let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
    let balanced = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalMetrics {
        overall,
        per_class,
        balanced,
    })
}
