//! RC and RTE metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::codec::StringTriple;

/// Gold and predicted relation (raw labels) for one RC query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RCOutcome {
    pub gold: String,
    pub predicted: Option<String>,
}

impl RCOutcome {
    pub fn new(gold: impl Into<String>, predicted: Option<impl Into<String>>) -> Self {
        Self {
            gold: gold.into(),
            predicted: predicted.map(Into::into),
        }
    }
}

/// Gold and predicted triples for one sentence. Matching is exact on all
/// three strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleOutcome {
    pub gold: BTreeSet<StringTriple>,
    /// In prediction order; the first is the single-triple answer.
    pub predicted: Vec<StringTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Labels with no gold and no predicted instance (scored 0).
    pub flagged: Vec<String>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Macro-averaged precision, recall and F1 over `labels`. Null predictions
/// are false negatives for the gold label only.
pub fn macro_prf(outcomes: &[RCOutcome], labels: &[String]) -> Result<MacroPrf, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Metric("label set is empty".into()));
    }
    let labels: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    // (tp, fp, fn)
    let mut counts: BTreeMap<&str, (usize, usize, usize)> =
        labels.iter().map(|l| (*l, (0, 0, 0))).collect();
    for o in outcomes {
        match o.predicted.as_deref() {
            Some(p) if p == o.gold => {
                if let Some(c) = counts.get_mut(p) {
                    c.0 += 1;
                }
            }
            Some(p) => {
                if let Some(c) = counts.get_mut(p) {
                    c.1 += 1;
                }
                if let Some(c) = counts.get_mut(o.gold.as_str()) {
                    c.2 += 1;
                }
            }
            None => {
                if let Some(c) = counts.get_mut(o.gold.as_str()) {
                    c.2 += 1;
                }
            }
        }
    }
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let mut flagged = Vec::new();
    for (label, (tp, fp, fn_)) in &counts {
        if tp + fp + fn_ == 0 {
            flagged.push(label.to_string());
        }
        let p = ratio(*tp, tp + fp);
        let r = ratio(*tp, tp + fn_);
        sp += p;
        sr += r;
        sf += f1(p, r);
    }
    let n = counts.len() as f64;
    Ok(MacroPrf {
        precision: sp / n,
        recall: sr / n,
        f1: sf / n,
        flagged,
    })
}

/// Fraction of sentences whose first predicted triple equals the single gold.
pub fn rte_accuracy(outcomes: &[TripleOutcome]) -> Result<f64, EvalError> {
    let mut correct = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.gold.len() != 1 {
            return Err(EvalError::Metric(format!(
                "outcome {i} has {} gold triples; accuracy needs exactly one",
                o.gold.len()
            )));
        }
        if o.predicted.first().is_some_and(|p| o.gold.contains(p)) {
            correct += 1;
        }
    }
    Ok(ratio(correct, outcomes.len()))
}

/// True positive, false positive and false negative counts.
pub trait MicroCounts {
    fn counts(&self) -> (usize, usize, usize);
}

impl MicroCounts for RCOutcome {
    fn counts(&self) -> (usize, usize, usize) {
        match &self.predicted {
            Some(p) if *p == self.gold => (1, 0, 0),
            Some(_) => (0, 1, 1),
            None => (0, 0, 1),
        }
    }
}

impl MicroCounts for TripleOutcome {
    fn counts(&self) -> (usize, usize, usize) {
        let predicted: BTreeSet<&StringTriple> = self.predicted.iter().collect();
        let tp = predicted.iter().filter(|p| self.gold.contains(**p)).count();
        (tp, predicted.len() - tp, self.gold.len() - tp)
    }
}

/// `2TP / (2TP + FP + FN)`, or 0 when there is nothing to count.
pub fn micro_f1<O: MicroCounts>(outcomes: &[O]) -> f64 {
    let (tp, fp, fn_) = outcomes.iter().map(MicroCounts::counts).fold((0, 0, 0), |a, c| {
        (a.0 + c.0, a.1 + c.1, a.2 + c.2)
    });
    ratio(2 * tp, 2 * tp + fp + fn_)
}
