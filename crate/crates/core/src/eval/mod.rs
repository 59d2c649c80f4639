//! Metrics, evaluation suites, sweeps and report serialization.

pub mod metrics;
pub mod report;
pub mod suite;
pub mod sweep;

use thiserror::Error;

pub use metrics::{macro_prf, micro_f1, rte_accuracy, MacroPrf, MicroCounts, RCOutcome, TripleOutcome};
pub use report::{Report, ReportSet, SeedMetrics, Setting, Task, REPORT_SCHEMA_VERSION};
pub use suite::{
    evaluate_plan, metric_key, run_few_shot_suite, run_zero_shot_suite, EvalPlan, FewShotConfig,
    ZeroShotConfig, FEW_RC_F1, FEW_RTE_F1, ZERO_RC_F1, ZERO_RC_PRECISION, ZERO_RC_RECALL,
    ZERO_RTE_ACCURACY,
};
pub use sweep::{
    experiment_vocab, label_replacement_ablation, replaced_target, subsample_bundles, sweep_dataset_count,
    sweep_k, train_and_evaluate, Experiment,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Episode(#[from] crate::episode::EpisodeError),
    #[error(transparent)]
    Train(#[from] crate::toy::TrainError),
    #[error("empty report: {0}")]
    EmptyReport(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("configuration: {0}")]
    Config(String),
}
