//! Per-client GRU encoder-decoder: parameters, forward/backward, Adam and training.

mod adam;
mod checkpoint;
mod gru;
mod params;
mod seq2seq;
mod train;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use gru::gru_cell;
pub use params::{Grads, GruArch, GruLayerParams, GruSeq2Seq, Tensor};
pub use seq2seq::{mse_grad, mse_loss, MaskedLoss, Tape};
pub use train::{
    batch_gradient, predict_split, train_epochs, train_epochs_seeded, Batch, TrainOptions,
};
