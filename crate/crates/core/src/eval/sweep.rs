//! Ablations that meta-train one toy model per cell: the k sweep, the
//! dataset-count sweep and the label-replacement grid.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{Report, ReportSet, SeedMetrics, Setting, Task};
use super::suite::{
    evaluate_plan, metric_key, EvalPlan, ZERO_RC_F1, ZERO_RC_PRECISION, ZERO_RC_RECALL,
    ZERO_RTE_ACCURACY,
};
use super::EvalError;
use crate::data::{alias_map, apply_aliases, replace_labels, DatasetBundle, MetaCorpus};
use crate::episode::MetaTrainConfig;
use crate::inference::{map_ordered, InferenceOptions};
use crate::toy::train::bundle_texts;
use crate::toy::{meta_train, ToyBackend, ToyLMConfig, Vocab};

/// Training and evaluation settings shared by every cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub train: MetaTrainConfig,
    pub lm: ToyLMConfig,
    pub plan: EvalPlan,
    /// Cells trained in parallel.
    pub jobs: usize,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            train: MetaTrainConfig::default(),
            lm: ToyLMConfig::default(),
            plan: EvalPlan::default(),
            jobs: 1,
        }
    }
}

/// Target labels replaced by `R1..RI`.
pub fn replaced_target(target: &DatasetBundle) -> DatasetBundle {
    apply_aliases(target, &alias_map(target.schema.iter()))
}

/// Vocabulary covering the corpus and target with original and replaced labels.
pub fn experiment_vocab(corpus: &MetaCorpus, target: &DatasetBundle) -> Vocab {
    let (repl, _) = replace_labels(corpus);
    let rt = replaced_target(target);
    let texts: Vec<String> = corpus
        .bundles
        .iter()
        .chain(&repl.bundles)
        .chain([target, &rt])
        .flat_map(bundle_texts)
        .collect();
    Vocab::build(texts.iter().map(String::as_str))
}

/// Meta-trains on `corpus` and evaluates the resulting model on `target`.
/// Training sampling and initialization are both seeded by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_and_evaluate(
    corpus: &MetaCorpus,
    target: &DatasetBundle,
    vocab: &Vocab,
    train: &MetaTrainConfig,
    lm: &ToyLMConfig,
    plan: &EvalPlan,
    skip: &[Task],
    seed: u64,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let train = MetaTrainConfig {
        seed,
        ..train.clone()
    };
    let lm = ToyLMConfig {
        seed,
        ..lm.clone()
    };
    let outcome = meta_train(corpus, vocab, &train, &lm)?;
    let backend = ToyBackend::new(outcome.params, vocab.clone(), train.block_size)?;
    evaluate_plan(&backend, target, plan, skip, &InferenceOptions::default())
}

struct Cell<'a> {
    row: usize,
    corpus: &'a MetaCorpus,
    target: &'a DatasetBundle,
    train: MetaTrainConfig,
    skip: Vec<Task>,
    seed: u64,
}

fn run_cells(
    cells: &[Cell<'_>],
    rows: Vec<Setting>,
    vocab: &Vocab,
    exp: &Experiment,
) -> Result<Vec<Report>, EvalError> {
    let results = map_ordered::<_, _, EvalError, _>(cells, exp.jobs, |c| {
        train_and_evaluate(c.corpus, c.target, vocab, &c.train, &exp.lm, &exp.plan, &c.skip, c.seed)
    })?;
    let mut per_row: Vec<Vec<SeedMetrics>> = vec![Vec::new(); rows.len()];
    for (c, metrics) in cells.iter().zip(results) {
        per_row[c.row].push(SeedMetrics {
            seed: c.seed,
            metrics,
            flagged_labels: Vec::new(),
        });
    }
    rows.into_iter()
        .zip(per_row)
        .map(|(setting, seeds)| Report::aggregate(setting, seeds))
        .collect()
}

/// One model per (k, seed); a report per k over the seeds.
pub fn sweep_k(
    corpus: &MetaCorpus,
    target: &DatasetBundle,
    k_values: &[usize],
    seeds: &[u64],
    exp: &Experiment,
) -> Result<ReportSet, EvalError> {
    let vocab = experiment_vocab(corpus, target);
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for (row, &k) in k_values.iter().enumerate() {
        rows.push(Setting {
            k_train: Some(k),
            ..Setting::labeled(format!("k={k}"))
        });
        for &seed in seeds {
            cells.push(Cell {
                row,
                corpus,
                target,
                train: MetaTrainConfig {
                    k,
                    ..exp.train.clone()
                },
                skip: Vec::new(),
                seed,
            });
        }
    }
    Ok(ReportSet::new(
        "meta-training demonstrations (k)",
        run_cells(&cells, rows, &vocab, exp)?,
    ))
}

/// `count` bundles chosen uniformly with `seed`, kept in corpus order.
pub fn subsample_bundles(corpus: &MetaCorpus, count: usize, seed: u64) -> MetaCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, corpus.bundles.len(), count).into_vec();
    idx.sort_unstable();
    MetaCorpus {
        bundles: idx.into_iter().map(|i| corpus.bundles[i].clone()).collect(),
        cap: corpus.cap,
    }
}

/// For each count and seed, trains on a random subset of that many bundles.
pub fn sweep_dataset_count(
    corpus: &MetaCorpus,
    target: &DatasetBundle,
    counts: &[usize],
    seeds: &[u64],
    exp: &Experiment,
) -> Result<ReportSet, EvalError> {
    let available = corpus.bundles.len();
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > available) {
        return Err(EvalError::Config(format!(
            "cannot choose {c} of {available} meta-training datasets"
        )));
    }
    let vocab = experiment_vocab(corpus, target);
    let subsets: Vec<(usize, u64, MetaCorpus)> = counts
        .iter()
        .enumerate()
        .flat_map(|(row, &c)| seeds.iter().map(move |&s| (row, s, c)))
        .map(|(row, s, c)| (row, s, subsample_bundles(corpus, c, s)))
        .collect();
    let cells: Vec<Cell<'_>> = subsets
        .iter()
        .map(|(row, seed, sub)| Cell {
            row: *row,
            corpus: sub,
            target,
            train: exp.train.clone(),
            skip: Vec::new(),
            seed: *seed,
        })
        .collect();
    let rows = counts
        .iter()
        .map(|&c| Setting {
            datasets: Some(c),
            ..Setting::labeled(format!("C={c}"))
        })
        .collect();
    Ok(ReportSet::new(
        "meta-training datasets (C)",
        run_cells(&cells, rows, &vocab, exp)?,
    ))
}

fn zero_shot_keys(plan: &EvalPlan) -> Vec<String> {
    let mut keys = Vec::new();
    for &m in &plan.zero.m_values {
        if plan.tasks.contains(&Task::ZeroRc) {
            let s = Setting::zero(Task::ZeroRc, m);
            for metric in [ZERO_RC_PRECISION, ZERO_RC_RECALL, ZERO_RC_F1] {
                keys.push(metric_key(metric, &s));
            }
        }
        if plan.tasks.contains(&Task::ZeroRte) {
            keys.push(metric_key(ZERO_RTE_ACCURACY, &Setting::zero(Task::ZeroRte, m)));
        }
    }
    keys
}

/// The five-row label-replacement grid: an untrained baseline, then every
/// combination of original/replaced labels for training and test. Zero-shot
/// metrics are not applicable when test labels are replaced.
pub fn label_replacement_ablation(
    corpus: &MetaCorpus,
    target: &DatasetBundle,
    seeds: &[u64],
    exp: &Experiment,
) -> Result<ReportSet, EvalError> {
    let vocab = experiment_vocab(corpus, target);
    let (repl_corpus, _) = replace_labels(corpus);
    let repl_target = replaced_target(target);
    let zero = [Task::ZeroRc, Task::ZeroRte];
    let untrained = MetaTrainConfig {
        steps: 0,
        ..exp.train.clone()
    };
    let rows: [(&str, &MetaCorpus, &DatasetBundle, &MetaTrainConfig, bool); 5] = [
        ("no meta-training", corpus, target, &untrained, false),
        ("train=original test=original", corpus, target, &exp.train, false),
        ("train=original test=replaced", corpus, &repl_target, &exp.train, true),
        ("train=replaced test=original", &repl_corpus, target, &exp.train, false),
        ("train=replaced test=replaced", &repl_corpus, &repl_target, &exp.train, true),
    ];
    let mut cells = Vec::new();
    for (row, (_, c, t, train, replaced_test)) in rows.iter().enumerate() {
        for &seed in seeds {
            cells.push(Cell {
                row,
                corpus: c,
                target: t,
                train: (*train).clone(),
                skip: if *replaced_test { zero.to_vec() } else { Vec::new() },
                seed,
            });
        }
    }
    let settings = rows.iter().map(|r| Setting::labeled(r.0)).collect();
    let mut reports = run_cells(&cells, settings, &vocab, exp)?;
    let na = zero_shot_keys(&exp.plan);
    for (report, row) in reports.iter_mut().zip(&rows) {
        if row.4 {
            report.not_applicable = na.clone();
        }
    }
    Ok(ReportSet::new("label replacement", reports))
}
