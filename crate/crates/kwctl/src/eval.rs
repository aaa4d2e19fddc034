//! Checkpoint evaluation: accuracy and mean cross-entropy at tau = 0.

use kw_core::tensor::ops;
use rayon::prelude::*;
use serde::Serialize;

use crate::idx::Dataset;
use crate::model::KwNet;
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Evaluate over the whole dataset.
///
/// Batches run in parallel (worker count comes from the global rayon pool,
/// capped by `KW_THREADS`); per-batch sums are reduced in batch order, so the
/// result does not depend on the thread count.
pub fn evaluate(net: &KwNet, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(CliError::Config("evaluation dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();

    let partial: Vec<(f64, usize)> = batches
        .par_iter()
        .map(|chunk| -> Result<(f64, usize)> {
            let (x, labels) = data.batch(chunk);
            let logits = net.infer_logits(&x, 0.0)?;
            let loss = ops::softmax_cross_entropy(&logits, &labels)?.item()?;
            let k = net.num_classes();
            let mut correct = 0;
            for (row, &label) in labels.iter().enumerate() {
                let r = &logits.data()[row * k..(row + 1) * k];
                let argmax = r
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if argmax == label {
                    correct += 1;
                }
            }
            Ok((loss * labels.len() as f64, correct))
        })
        .collect::<Result<_>>()?;

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (l, c) in partial {
        loss_sum += l;
        correct += c;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        samples: data.len(),
    })
}
