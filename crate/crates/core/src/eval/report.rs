//! Multi-seed reports and their JSON / markdown forms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ZeroRc,
    ZeroRte,
    FewRc,
    FewRte,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::ZeroRc => "zero-rc",
            Task::ZeroRte => "zero-rte",
            Task::FewRc => "few-rc",
            Task::FewRte => "few-rte",
        }
    }
}

/// What a report row is about.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_way: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_shot: Option<usize>,
    /// Demonstrations per meta-training instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datasets: Option<usize>,
}

impl Setting {
    pub fn labeled(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Default::default()
        }
    }

    pub fn zero(task: Task, m: usize) -> Self {
        Self {
            label: format!("m={m}"),
            task: Some(task),
            m: Some(m),
            ..Default::default()
        }
    }

    pub fn few(task: Task, n: usize, k: usize) -> Self {
        Self {
            label: format!("{n}-way-{k}-shot"),
            task: Some(task),
            n_way: Some(n),
            k_shot: Some(k),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub setting: Setting,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub std: BTreeMap<String, f64>,
    pub single_seed: bool,
    /// Metrics that cannot be computed in this setting.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_applicable: Vec<String>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl Report {
    /// Aggregates per-seed metrics. Every seed must report the same metrics.
    pub fn aggregate(setting: Setting, per_seed: Vec<SeedMetrics>) -> Result<Self, EvalError> {
        let Some(first) = per_seed.first() else {
            return Err(EvalError::EmptyReport(setting.label));
        };
        let names: BTreeSet<&String> = first.metrics.keys().collect();
        if per_seed
            .iter()
            .any(|s| s.metrics.keys().collect::<BTreeSet<_>>() != names)
        {
            return Err(EvalError::Metric(format!(
                "seeds of {} report different metrics",
                setting.label
            )));
        }
        let mut means = BTreeMap::new();
        let mut stds = BTreeMap::new();
        for name in names {
            let xs: Vec<f64> = per_seed.iter().map(|s| s.metrics[name]).collect();
            means.insert(name.clone(), mean(&xs));
            stds.insert(name.clone(), sample_std(&xs));
        }
        Ok(Self {
            setting,
            single_seed: per_seed.len() == 1,
            per_seed,
            mean: means,
            std: stds,
            not_applicable: Vec::new(),
        })
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.per_seed
            .iter()
            .filter_map(|s| s.metrics.get(metric).copied())
            .collect()
    }
}

/// A titled collection of reports, serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub schema_version: u32,
    pub title: String,
    pub reports: Vec<Report>,
}

impl ReportSet {
    pub fn new(title: impl Into<String>, reports: Vec<Report>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            title: title.into(),
            reports,
        }
    }

    pub fn per_seed_rows(&self) -> usize {
        self.reports.iter().map(|r| r.per_seed.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// One row per report, one column per metric, cells `mean ± std`.
    pub fn to_markdown(&self) -> String {
        let metrics: BTreeSet<&String> = self
            .reports
            .iter()
            .flat_map(|r| r.mean.keys().chain(r.not_applicable.iter()))
            .collect();
        let mut out = format!("# {}\n\n| Setting | Seeds |", self.title);
        for m in &metrics {
            let _ = write!(out, " {m} |");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(metrics.len()));
        out.push('\n');
        for r in &self.reports {
            let _ = write!(out, "| {} | {} |", r.setting.label, r.per_seed.len());
            for m in &metrics {
                if r.not_applicable.contains(m) {
                    out.push_str(" N/A |");
                } else if let Some(v) = r.mean.get(*m) {
                    let _ = write!(out, " {:.2} ± {:.2} |", 100.0 * v, 100.0 * r.std[*m]);
                } else {
                    out.push_str(" |");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(seed: u64, v: f64) -> SeedMetrics {
        SeedMetrics {
            seed,
            metrics: [("f1".to_string(), v)].into_iter().collect(),
            flagged_labels: vec![],
        }
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let r = Report::aggregate(Setting::labeled("x"), vec![seed(0, 0.2), seed(1, 0.4), seed(2, 0.6)]).unwrap();
        assert!((r.mean["f1"] - 0.4).abs() < 1e-12);
        assert!((r.std["f1"] - 0.2).abs() < 1e-12);
        assert!(!r.single_seed);
    }

    #[test]
    fn single_seed_is_flagged() {
        let r = Report::aggregate(Setting::labeled("x"), vec![seed(0, 0.7)]).unwrap();
        assert!(r.single_seed);
        assert_eq!(r.std["f1"], 0.0);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(
            Report::aggregate(Setting::labeled("x"), vec![]),
            Err(EvalError::EmptyReport(_))
        ));
    }

    #[test]
    fn markdown_marks_not_applicable() {
        let mut a = Report::aggregate(Setting::labeled("a"), vec![seed(0, 0.5)]).unwrap();
        a.not_applicable.push("zero".into());
        let set = ReportSet::new("t", vec![a]);
        let md = set.to_markdown();
        assert!(md.contains("| a | 1 | 50.00 ± 0.00 | N/A |"), "{md}");
        let back: ReportSet = serde_json::from_str(&set.to_json()).unwrap();
        assert_eq!(back, set);
    }
}
