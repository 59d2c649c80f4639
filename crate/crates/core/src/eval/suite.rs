//! Zero-shot and few-shot evaluation protocols over a single backend.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{macro_prf, micro_f1, rte_accuracy, RCOutcome, TripleOutcome};
use super::report::{Report, SeedMetrics, Setting, Task};
use super::EvalError;
use crate::backend::Backend;
use crate::codec::{HeaderOrder, StringTriple};
use crate::data::{DatasetBundle, RERecord};
use crate::episode::{default_queries, sample_fewshot_episode, sample_zeroshot_tasks};
use crate::inference::{
    few_shot_rc, few_shot_rte, map_ordered, zero_shot_rc, zero_shot_rte, InferenceOptions,
    Prediction, RteMode,
};

pub const ZERO_RC_PRECISION: &str = "zero_rc_precision";
pub const ZERO_RC_RECALL: &str = "zero_rc_recall";
pub const ZERO_RC_F1: &str = "zero_rc_macro_f1";
pub const ZERO_RTE_ACCURACY: &str = "zero_rte_accuracy";
pub const FEW_RC_F1: &str = "few_rc_micro_f1";
pub const FEW_RTE_F1: &str = "few_rte_micro_f1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotConfig {
    pub m_values: Vec<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Evaluate at most this many records per task (in bundle order).
    pub max_queries: Option<usize>,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            m_values: vec![5, 10, 15],
            repeats: 5,
            base_seed: 0,
            max_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    /// (N, K) pairs.
    pub settings: Vec<(usize, usize)>,
    pub episodes_per_run: usize,
    /// Queries per episode; `5N` when unset.
    pub queries: Option<usize>,
    pub runs: usize,
    pub base_seed: u64,
    pub order: HeaderOrder,
    pub rte_mode: RteMode,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            settings: vec![(5, 1), (5, 5), (10, 1), (10, 5)],
            episodes_per_run: 10,
            queries: None,
            runs: 5,
            base_seed: 0,
            order: HeaderOrder::Pso,
            rte_mode: RteMode::Generative,
        }
    }
}

fn single_gold(r: &RERecord) -> BTreeSet<StringTriple> {
    [StringTriple::from_triple(r.designated())].into_iter().collect()
}

fn all_gold(r: &RERecord) -> BTreeSet<StringTriple> {
    r.triples.iter().map(StringTriple::from_triple).collect()
}

fn rc_outcome(r: &RERecord, p: &Prediction) -> RCOutcome {
    RCOutcome::new(
        r.relation().raw(),
        p.predicted_relation().map(|l| l.raw().to_string()),
    )
}

/// Runs zero-shot RC and/or RTE for every `m`; one report per (task, m),
/// RC reports first, each aggregating `repeats` seeds.
pub fn run_zero_shot_suite<B: Backend + ?Sized>(
    backend: &B,
    bundle: &DatasetBundle,
    cfg: &ZeroShotConfig,
    tasks: &[Task],
    opts: &InferenceOptions,
) -> Result<Vec<Report>, EvalError> {
    if cfg.repeats == 0 {
        return Err(EvalError::EmptyReport("zero-shot suite with 0 repeats".into()));
    }
    let max_m = cfg.m_values.iter().copied().max().unwrap_or(0);
    if max_m > bundle.schema.len() {
        return Err(EvalError::Config(format!(
            "m={max_m} exceeds the {} relations of {}",
            bundle.schema.len(),
            bundle.name
        )));
    }
    let mut by_task: BTreeMap<Task, Vec<Report>> = BTreeMap::new();
    for &m in &cfg.m_values {
        let zs = sample_zeroshot_tasks(bundle, m, cfg.repeats, cfg.base_seed)?;
        let mut rc_seeds = Vec::new();
        let mut rte_seeds = Vec::new();
        for task in &zs {
            let records = match cfg.max_queries {
                Some(n) => &task.eval_records[..n.min(task.eval_records.len())],
                None => &task.eval_records[..],
            };
            if tasks.contains(&Task::ZeroRc) {
                let outcomes = map_ordered::<_, _, EvalError, _>(records, opts.jobs, |r| {
                    let p = zero_shot_rc(backend, r, &task.relations, HeaderOrder::Pso, opts)?;
                    Ok(rc_outcome(r, &p))
                })?;
                let labels: Vec<String> = task.relations.iter().map(|l| l.raw().to_string()).collect();
                let prf = macro_prf(&outcomes, &labels)?;
                rc_seeds.push(SeedMetrics {
                    seed: task.seed,
                    metrics: [
                        (ZERO_RC_PRECISION.to_string(), prf.precision),
                        (ZERO_RC_RECALL.to_string(), prf.recall),
                        (ZERO_RC_F1.to_string(), prf.f1),
                    ]
                    .into_iter()
                    .collect(),
                    flagged_labels: prf.flagged,
                });
            }
            if tasks.contains(&Task::ZeroRte) {
                let outcomes = map_ordered::<_, _, EvalError, _>(records, opts.jobs, |r| {
                    let p = zero_shot_rte(backend, r, &task.relations, HeaderOrder::Pso, opts)?;
                    Ok(TripleOutcome {
                        gold: single_gold(r),
                        predicted: p.predicted_triple().cloned().into_iter().collect(),
                    })
                })?;
                rte_seeds.push(SeedMetrics {
                    seed: task.seed,
                    metrics: [(ZERO_RTE_ACCURACY.to_string(), rte_accuracy(&outcomes)?)]
                        .into_iter()
                        .collect(),
                    flagged_labels: Vec::new(),
                });
            }
        }
        for (task, seeds) in [(Task::ZeroRc, rc_seeds), (Task::ZeroRte, rte_seeds)] {
            if tasks.contains(&task) {
                by_task
                    .entry(task)
                    .or_default()
                    .push(Report::aggregate(Setting::zero(task, m), seeds)?);
            }
        }
    }
    Ok(by_task.into_values().flatten().collect())
}

/// Seed of episode `e` within run `run`.
pub fn episode_seed(run_seed: u64, e: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003).wrapping_add(e as u64)
}

/// Runs few-shot RC or RTE; one report per (N, K) with one micro-F1 per run.
pub fn run_few_shot_suite<B: Backend + ?Sized>(
    backend: &B,
    bundle: &DatasetBundle,
    cfg: &FewShotConfig,
    task: Task,
    opts: &InferenceOptions,
) -> Result<Vec<Report>, EvalError> {
    if !matches!(task, Task::FewRc | Task::FewRte) {
        return Err(EvalError::Config(format!("{} is not a few-shot task", task.name())));
    }
    if cfg.episodes_per_run == 0 || cfg.runs == 0 {
        return Err(EvalError::EmptyReport(
            "few-shot suite needs at least one episode and one run".into(),
        ));
    }
    let mut reports = Vec::new();
    for &(n, k) in &cfg.settings {
        let q = cfg.queries.unwrap_or_else(|| default_queries(n));
        let mut seeds = Vec::new();
        for run in 0..cfg.runs {
            let run_seed = cfg.base_seed.wrapping_add(run as u64);
            let mut rc = Vec::new();
            let mut rte = Vec::new();
            for e in 0..cfg.episodes_per_run {
                let ep = sample_fewshot_episode(bundle, n, k, q, episode_seed(run_seed, e))?;
                match task {
                    Task::FewRc => {
                        let preds = few_shot_rc(backend, &ep, cfg.order, opts)?;
                        rc.extend(ep.queries.iter().zip(&preds).map(|(r, p)| rc_outcome(r, p)));
                    }
                    _ => {
                        let preds = few_shot_rte(backend, &ep, cfg.order, cfg.rte_mode, None, opts)?;
                        rte.extend(ep.queries.iter().zip(preds).map(|(r, p)| TripleOutcome {
                            gold: all_gold(r),
                            predicted: p.triples,
                        }));
                    }
                }
            }
            let (name, value) = match task {
                Task::FewRc => (FEW_RC_F1, micro_f1(&rc)),
                _ => (FEW_RTE_F1, micro_f1(&rte)),
            };
            seeds.push(SeedMetrics {
                seed: run_seed,
                metrics: [(name.to_string(), value)].into_iter().collect(),
                flagged_labels: Vec::new(),
            });
        }
        reports.push(Report::aggregate(Setting::few(task, n, k), seeds)?);
    }
    Ok(reports)
}

/// Which evaluations a trained model goes through inside sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalPlan {
    pub tasks: Vec<Task>,
    pub zero: ZeroShotConfig,
    pub few: FewShotConfig,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            tasks: vec![Task::ZeroRc, Task::ZeroRte, Task::FewRc, Task::FewRte],
            zero: ZeroShotConfig {
                m_values: vec![5],
                ..Default::default()
            },
            few: FewShotConfig {
                settings: vec![(5, 1)],
                ..Default::default()
            },
        }
    }
}

/// Key under which a sweep records `metric` for `setting`.
pub fn metric_key(metric: &str, setting: &Setting) -> String {
    format!("{metric}@{}", setting.label)
}

/// Runs the plan and collapses every report to its mean, keyed by
/// [`metric_key`]. Tasks listed in `skip` are left out.
pub fn evaluate_plan<B: Backend + ?Sized>(
    backend: &B,
    bundle: &DatasetBundle,
    plan: &EvalPlan,
    skip: &[Task],
    opts: &InferenceOptions,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let wanted = |t: Task| plan.tasks.contains(&t) && !skip.contains(&t);
    let mut reports = Vec::new();
    let zero: Vec<Task> = [Task::ZeroRc, Task::ZeroRte].into_iter().filter(|t| wanted(*t)).collect();
    if !zero.is_empty() {
        reports.extend(run_zero_shot_suite(backend, bundle, &plan.zero, &zero, opts)?);
    }
    for t in [Task::FewRc, Task::FewRte] {
        if wanted(t) {
            reports.extend(run_few_shot_suite(backend, bundle, &plan.few, t, opts)?);
        }
    }
    Ok(reports
        .iter()
        .flat_map(|r| {
            r.mean
                .iter()
                .map(|(m, v)| (metric_key(m, &r.setting), *v))
                .collect::<Vec<_>>()
        })
        .collect())
}
