use rand::seq::SliceRandom;

use super::adam::{adam_step, clip_global_norm, AdamState};
use super::params::GruSeq2Seq;
use super::seq2seq::{mse_grad, mse_loss};
use crate::data::{Sequence, WindowedSplit};
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, SimRng};

/// Sequences packed batch-major for [`GruSeq2Seq::forward_batch`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn gather<'a>(seqs: impl IntoIterator<Item = &'a Sequence>) -> Batch {
        let mut b = Batch {
            size: 0,
            inputs: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for s in seqs {
            b.size += 1;
            b.inputs.extend_from_slice(&s.input);
            b.targets.extend_from_slice(&s.target);
            b.mask.extend_from_slice(&s.target_mask);
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm gradient clip; off when `None`.
    pub clip_norm: Option<f64>,
}

/// Masked MSE and its gradient for one batch. Returns `None` when the batch has no
/// observed targets.
pub fn batch_gradient(
    model: &GruSeq2Seq,
    batch: &Batch,
) -> Result<Option<(f64, usize, GruSeq2Seq)>> {
    let (y_hat, tape) = model.forward_batch(&batch.inputs, batch.size)?;
    let loss = mse_loss(&y_hat, &batch.targets, &batch.mask)?;
    if !loss.is_defined() {
        return Ok(None);
    }
    let grads = model.backward(&tape, &mse_grad(&y_hat, &batch.targets, &batch.mask))?;
    Ok(Some((loss.value, loss.count, grads)))
}

/// Minibatch training. The sequence order is reshuffled from `rng` every epoch and the
/// last partial batch is kept; batches without observed targets are skipped. Returns
/// the masked train MSE of each epoch.
pub fn train_epochs(
    model: &mut GruSeq2Seq,
    state: &mut AdamState,
    split: &WindowedSplit,
    opts: TrainOptions,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    if split.is_empty() {
        return Err(Error::EmptyInput("training split has no sequences"));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = Vec::with_capacity(split.len());
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        // Shuffle from the identity so that epochs split across calls match a single call.
        order.clear();
        order.extend(0..split.len());
        order.shuffle(rng);
        let (mut weighted, mut count) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let batch = Batch::gather(chunk.iter().map(|&i| &split.sequences[i]));
            let Some((loss, n, mut grads)) = batch_gradient(model, &batch)? else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "epoch {epoch}: loss is {loss}"
                )));
            }
            if let Some(max_norm) = opts.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(model, &grads, state)?;
            weighted += loss * n as f64;
            count += n;
        }
        history.push(if count > 0 {
            weighted / count as f64
        } else {
            0.0
        });
    }
    Ok(history)
}

/// [`train_epochs`] with a fresh shuffling stream from `seed`.
pub fn train_epochs_seeded(
    model: &mut GruSeq2Seq,
    state: &mut AdamState,
    split: &WindowedSplit,
    opts: TrainOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    train_epochs(model, state, split, opts, &mut seeded_rng(seed))
}

/// Predictions for every sequence of `split`, in order, flattened `len x horizon_out x input_dim`.
pub fn predict_split(
    model: &GruSeq2Seq,
    split: &WindowedSplit,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(split.len() * split.horizon_out * split.input_dim);
    for chunk in split.sequences.chunks(batch_size.max(1)) {
        let batch = Batch::gather(chunk);
        out.extend(model.predict_batch(&batch.inputs, batch.size)?);
    }
    Ok(out)
}
