//! Meta in-context training and evaluation harness for zero- and few-shot
//! relation extraction.
//!
//! * [`data`]: record model, JSONL loading, balancing, label filtering.
//! * [`codec`]: tabular prompt rendering and parsing.
//! * [`episode`]: meta-training instances, loss masks, evaluation sampling.
//! * [`backend`]: the scoring/generation contract, mock and HTTP backends.
//! * [`toy`]: a trainable one-layer language model.
//! * [`inference`]: zero- and few-shot RC/RTE prediction.
//! * [`eval`]: metrics, suites, sweeps and ablations.
//! * [`synthetic`]: templated corpora for desk-scale experiments.

pub mod backend;
pub mod codec;
pub mod data;
pub mod episode;
pub mod eval;
pub mod inference;
pub mod synthetic;
pub mod toy;
