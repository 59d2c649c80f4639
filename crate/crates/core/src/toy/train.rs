//! Meta in-context training loop.
//!
//! Each step draws `batch_size` episodes (dataset, then `k + 1` records,
//! rendered as tables), masks everything except the final example's rows,
//! and applies one optimizer step on the mean masked NLL.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::model::{batch_loss_and_grad, ModelError, Parameters, ToyLMConfig};
use super::optim::Optimizer;
use super::vocab::Vocab;
use crate::codec::{render_block, BlockMode, HeaderOrder, RowSelection};
use crate::data::{DatasetBundle, MetaCorpus};
use crate::episode::{sample_meta_episode, tokenize_with_mask, EpisodeError, MetaTrainConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("meta-training corpus is empty")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Parameters,
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
}

impl TrainOutcome {
    /// Mean of the last `n` losses (all of them when fewer).
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.loss_curve[self.loss_curve.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Every record rendered fully in both header orders.
pub fn bundle_texts(bundle: &DatasetBundle) -> Vec<String> {
    bundle
        .splits
        .values()
        .flatten()
        .flat_map(|r| {
            HeaderOrder::ALL.into_iter().map(move |o| {
                render_block(r, o, &BlockMode::Full, RowSelection::All).text
            })
        })
        .chain(bundle.schema.iter().map(|l| l.display().to_string()))
        .collect()
}

/// Vocabulary over the renderings of the given bundles.
pub fn vocab_for<'a>(bundles: impl IntoIterator<Item = &'a DatasetBundle>) -> Vocab {
    let texts: Vec<String> = bundles.into_iter().flat_map(bundle_texts).collect();
    Vocab::build(texts.iter().map(String::as_str))
}

/// Runs `cfg.steps` optimizer steps. Episode sampling is seeded by
/// `cfg.seed` and initialization by `lm.seed`, so runs are bit-reproducible.
pub fn meta_train(
    corpus: &MetaCorpus,
    vocab: &Vocab,
    cfg: &MetaTrainConfig,
    lm: &ToyLMConfig,
) -> Result<TrainOutcome, TrainError> {
    meta_train_with(corpus, vocab, cfg, lm, |_, _| {})
}

/// [`meta_train`] with a per-step callback receiving `(step, loss)`.
pub fn meta_train_with(
    corpus: &MetaCorpus,
    vocab: &Vocab,
    cfg: &MetaTrainConfig,
    lm: &ToyLMConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    if corpus.bundles.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    cfg.validate()?;
    lm.validate(cfg.block_size)?;
    let mut params = Parameters::init(lm, vocab.len())?;
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(TrainOutcome { params, loss_curve });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(lm.optimizer, lm.lr, &params);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            let ep = sample_meta_episode(corpus, cfg, &mut rng)?;
            batch.push(tokenize_with_mask(&ep, vocab, cfg.block_size)?);
        }
        let (loss, grads) = batch_loss_and_grad(&params, &batch)?;
        opt.step(&mut params, &grads);
        loss_curve.push(loss);
        on_step(step, loss);
    }
    Ok(TrainOutcome { params, loss_curve })
}
