//! A small trainable language model standing in for large pretrained ones.

pub mod backend;
pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use backend::ToyBackend;
pub use checkpoint::{Checkpoint, CheckpointError};
pub use model::{
    backward, batch_loss_and_grad, forward, masked_nll, Arch, ModelError, OptimizerKind,
    Parameters, ToyLMConfig,
};
pub use optim::Optimizer;
pub use train::{meta_train, meta_train_with, vocab_for, TrainError, TrainOutcome};
pub use vocab::{build_vocab, Vocab};

/// Wraps parameters and vocabulary as a scoring/generation backend.
pub fn as_backend(
    params: Parameters,
    vocab: Vocab,
    block_size: usize,
) -> Result<ToyBackend, crate::backend::BackendError> {
    ToyBackend::new(params, vocab, block_size)
}
