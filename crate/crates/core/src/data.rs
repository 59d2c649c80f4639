//! Relation-extraction data model, JSONL ingestion and corpus preparation.
//!
//! A [`RERecord`] is one sentence with its gold triples. Entity spans carry
//! character offsets counted in Unicode scalar values; every span is checked
//! against its sentence when the record is constructed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: span text {text:?} does not match sentence[{start}..{end}] = {found:?}")]
    SpanMismatch {
        line: usize,
        text: String,
        start: usize,
        end: usize,
        found: String,
    },
    #[error("line {line}: span offsets {start}..{end} invalid for sentence of length {len}")]
    SpanOutOfRange {
        line: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("line {line}: duplicate record id {id:?} in split {split}")]
    DuplicateId {
        line: usize,
        id: String,
        split: Split,
    },
    #[error("line {line}: record {id:?} has no triples")]
    NoTriples { line: usize, id: String },
    #[error("line {line}: pair_index {index} out of range for {count} triples")]
    PairIndex {
        line: usize,
        index: usize,
        count: usize,
    },
    #[error("predicate {0:?} is not in the declared schema")]
    UnknownPredicate(String),
    #[error("invalid relation alias {0:?}; expected R followed by a positive integer")]
    InvalidAlias(String),
}

/// Character-offset slice of a sentence (Unicode scalar values, end exclusive).
pub fn char_slice(sentence: &str, start: usize, end: usize) -> Option<&str> {
    if start >= end {
        return None;
    }
    let mut indices = sentence.char_indices().map(|(i, _)| i);
    let begin = if start == 0 {
        0
    } else {
        indices.nth(start)?
    };
    let mut rest = sentence[begin..].char_indices().map(|(i, _)| i);
    let len = end - start;
    let stop = match rest.nth(len) {
        Some(i) => begin + i,
        None => {
            if sentence[begin..].chars().count() == len {
                sentence.len()
            } else {
                return None;
            }
        }
    };
    Some(&sentence[begin..stop])
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(text: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            text: text.into(),
            start,
            end,
        }
    }

    /// Builds a span for the first occurrence of `text` in `sentence`.
    pub fn locate(sentence: &str, text: &str) -> Option<Self> {
        let byte = sentence.find(text)?;
        let start = sentence[..byte].chars().count();
        let end = start + text.chars().count();
        (end > start).then(|| Self::new(text, start, end))
    }

    fn validate(&self, sentence: &str, line: usize) -> Result<(), DataError> {
        let len = sentence.chars().count();
        if self.start >= self.end || self.end > len {
            return Err(DataError::SpanOutOfRange {
                line,
                start: self.start,
                end: self.end,
                len,
            });
        }
        let found = char_slice(sentence, self.start, self.end).unwrap_or_default();
        if found != self.text {
            return Err(DataError::SpanMismatch {
                line,
                text: self.text.clone(),
                start: self.start,
                end: self.end,
                found: found.to_string(),
            });
        }
        Ok(())
    }
}

/// Lowercase alphanumeric tokens of a label; everything else separates.
pub fn normalize_label(raw: &str) -> Vec<String> {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A relation name, its normalized tokens and an optional opaque alias.
///
/// Equality and ordering consider only `raw`; the alias is presentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationLabel {
    raw: String,
    norm_tokens: Vec<String>,
    alias: Option<String>,
}

impl RelationLabel {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let norm_tokens = normalize_label(&raw);
        Self {
            raw,
            norm_tokens,
            alias: None,
        }
    }

    pub fn with_alias(mut self, alias: impl Into<String>) -> Result<Self, DataError> {
        let alias = alias.into();
        if !is_valid_alias(&alias) {
            return Err(DataError::InvalidAlias(alias));
        }
        self.alias = Some(alias);
        Ok(self)
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn norm_tokens(&self) -> &[String] {
        &self.norm_tokens
    }

    pub fn alias(&self) -> Option<&str> {
        self.alias.as_deref()
    }

    /// The string written into prompts: the alias when set, otherwise `raw`.
    pub fn display(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.raw)
    }
}

fn is_valid_alias(alias: &str) -> bool {
    alias
        .strip_prefix('R')
        .and_then(|n| n.parse::<u64>().ok())
        .is_some_and(|n| n >= 1 && !alias[1..].starts_with('0'))
}

impl PartialEq for RelationLabel {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}
impl Eq for RelationLabel {}
impl PartialOrd for RelationLabel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for RelationLabel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.raw.cmp(&other.raw)
    }
}
impl std::hash::Hash for RelationLabel {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.raw.hash(state);
    }
}
impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalTriple {
    pub subject: EntitySpan,
    pub predicate: RelationLabel,
    pub object: EntitySpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RERecord {
    pub id: String,
    pub sentence: String,
    pub triples: Vec<RelationalTriple>,
    pub dataset: String,
    /// Index of the triple an RC query is asked about.
    pub pair_index: usize,
}

impl RERecord {
    /// Validates every span and the designated pair index.
    pub fn new(
        id: impl Into<String>,
        sentence: impl Into<String>,
        triples: Vec<RelationalTriple>,
        dataset: impl Into<String>,
    ) -> Result<Self, DataError> {
        let record = Self {
            id: id.into(),
            sentence: sentence.into(),
            triples,
            dataset: dataset.into(),
            pair_index: 0,
        };
        record.validate(0)?;
        Ok(record)
    }

    pub fn with_pair_index(mut self, index: usize) -> Result<Self, DataError> {
        self.pair_index = index;
        self.validate(0)?;
        Ok(self)
    }

    fn validate(&self, line: usize) -> Result<(), DataError> {
        if self.triples.is_empty() {
            return Err(DataError::NoTriples {
                line,
                id: self.id.clone(),
            });
        }
        if self.pair_index >= self.triples.len() {
            return Err(DataError::PairIndex {
                line,
                index: self.pair_index,
                count: self.triples.len(),
            });
        }
        for t in &self.triples {
            t.subject.validate(&self.sentence, line)?;
            t.object.validate(&self.sentence, line)?;
        }
        Ok(())
    }

    pub fn designated(&self) -> &RelationalTriple {
        &self.triples[self.pair_index]
    }

    pub fn relation(&self) -> &RelationLabel {
        &self.designated().predicate
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub name: String,
    pub splits: BTreeMap<Split, Vec<RERecord>>,
    pub schema: BTreeSet<RelationLabel>,
}

impl DatasetBundle {
    /// Builds a bundle whose schema is the set of observed predicates.
    pub fn from_records(name: impl Into<String>, records: Vec<(Split, RERecord)>) -> Self {
        let mut bundle = DatasetBundle {
            name: name.into(),
            ..Default::default()
        };
        for (split, r) in records {
            for t in &r.triples {
                bundle.schema.insert(t.predicate.clone());
            }
            bundle.splits.entry(split).or_default().push(r);
        }
        bundle
    }

    pub fn split(&self, split: Split) -> &[RERecord] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn train(&self) -> &[RERecord] {
        self.split(Split::Train)
    }

    /// Records used for evaluation: test, else dev, else train.
    pub fn eval_records(&self) -> &[RERecord] {
        [Split::Test, Split::Dev, Split::Train]
            .into_iter()
            .map(|s| self.split(s))
            .find(|r| !r.is_empty())
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels (with aliases as stored) keyed by raw name.
    pub fn label(&self, raw: &str) -> Option<&RelationLabel> {
        self.schema.iter().find(|l| l.raw() == raw)
    }

    fn check_schema(&self) -> Result<(), DataError> {
        for r in self.splits.values().flatten() {
            for t in &r.triples {
                if !self.schema.contains(&t.predicate) {
                    return Err(DataError::UnknownPredicate(t.predicate.raw().to_string()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct SpanLine {
    text: String,
    start: usize,
    end: usize,
}

#[derive(Debug, Deserialize)]
struct TripleLine {
    subject: SpanLine,
    predicate: String,
    object: SpanLine,
}

#[derive(Debug, Deserialize)]
struct RecordLine {
    id: String,
    sentence: String,
    triples: Vec<TripleLine>,
    #[serde(default)]
    dataset: Option<String>,
    #[serde(default)]
    split: Option<Split>,
    #[serde(default)]
    pair_index: usize,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    sentence: &'a str,
    triples: Vec<TripleOut<'a>>,
    dataset: &'a str,
    split: Split,
    #[serde(skip_serializing_if = "is_zero")]
    pair_index: usize,
}

#[derive(Serialize)]
struct TripleOut<'a> {
    subject: &'a EntitySpan,
    predicate: &'a str,
    object: &'a EntitySpan,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads one JSONL file into a bundle.
///
/// Lines may carry optional `split` (default `train`), `dataset` (default:
/// file stem) and `pair_index` (default 0) fields. Blank lines are skipped.
/// With `schema_path` the schema is read from a sidecar file (one label per
/// line) and every predicate must belong to it.
pub fn load_jsonl(path: &Path, schema_path: Option<&Path>) -> Result<DatasetBundle, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut records = Vec::new();
    let mut seen: HashSet<(Split, String)> = HashSet::new();
    let mut name: Option<String> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let split = parsed.split.unwrap_or(Split::Train);
        if !seen.insert((split, parsed.id.clone())) {
            return Err(DataError::DuplicateId {
                line: line_no,
                id: parsed.id,
                split,
            });
        }
        let dataset = parsed.dataset.unwrap_or_else(|| stem.clone());
        name.get_or_insert_with(|| dataset.clone());
        let record = RERecord {
            id: parsed.id,
            sentence: parsed.sentence,
            triples: parsed
                .triples
                .into_iter()
                .map(|t| RelationalTriple {
                    subject: EntitySpan::new(t.subject.text, t.subject.start, t.subject.end),
                    predicate: RelationLabel::new(t.predicate),
                    object: EntitySpan::new(t.object.text, t.object.start, t.object.end),
                })
                .collect(),
            dataset,
            pair_index: parsed.pair_index,
        };
        record.validate(line_no)?;
        records.push((split, record));
    }
    let mut bundle = DatasetBundle::from_records(name.unwrap_or(stem), records);
    if let Some(sp) = schema_path {
        let text = fs::read_to_string(sp).map_err(|e| io_err(sp, e))?;
        bundle.schema = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(RelationLabel::new)
            .collect();
        bundle.check_schema()?;
    }
    Ok(bundle)
}

/// Writes a bundle as JSONL (one record per line, split tagged). Aliases are
/// not persisted.
pub fn write_jsonl(bundle: &DatasetBundle, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for (split, records) in &bundle.splits {
        for r in records {
            let line = RecordOut {
                id: &r.id,
                sentence: &r.sentence,
                triples: r
                    .triples
                    .iter()
                    .map(|t| TripleOut {
                        subject: &t.subject,
                        predicate: t.predicate.raw(),
                        object: &t.object,
                    })
                    .collect(),
                dataset: &r.dataset,
                split: *split,
                pair_index: r.pair_index,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Keeps at most `cap` training records, sampled uniformly without
/// replacement; the retained records keep their original order.
pub fn cap_training_set(bundle: &DatasetBundle, cap: usize, seed: u64) -> DatasetBundle {
    assert!(cap >= 1, "cap must be positive");
    let mut out = bundle.clone();
    if let Some(train) = out.splits.get_mut(&Split::Train) {
        if train.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = index::sample(&mut rng, train.len(), cap).into_vec();
            keep.sort_unstable();
            let sampled = keep.into_iter().map(|i| train[i].clone()).collect();
            *train = sampled;
        }
    }
    out
}

/// Meta-training collection: `C` bundles sharing a per-bundle training cap.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaCorpus {
    pub bundles: Vec<DatasetBundle>,
    pub cap: usize,
}

impl MetaCorpus {
    pub const DEFAULT_CAP: usize = 10_000;

    /// Applies [`cap_training_set`] to every bundle (seed offset by index).
    pub fn balanced(bundles: Vec<DatasetBundle>, cap: usize, seed: u64) -> Self {
        let bundles = bundles
            .iter()
            .enumerate()
            .map(|(i, b)| cap_training_set(b, cap, seed.wrapping_add(i as u64)))
            .collect();
        Self { bundles, cap }
    }

    pub fn labels(&self) -> BTreeSet<RelationLabel> {
        self.bundles
            .iter()
            .flat_map(|b| b.schema.iter().cloned())
            .collect()
    }
}

/// English function words ignored when comparing label names.
pub const DEFAULT_STOPWORDS: [&str; 25] = [
    "a", "an", "the", "of", "in", "on", "at", "to", "for", "by", "with", "from", "as", "into",
    "and", "or", "is", "was", "be", "has", "had", "per", "its", "that", "this",
];

#[derive(Debug, Clone)]
pub struct Stopwords(BTreeSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self(DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl Stopwords {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        )
    }

    /// One word per line.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(Self::from_words(text.lines()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

/// True when the two labels share a normalized token that is not a stopword.
pub fn labels_overlap(a: &RelationLabel, b: &RelationLabel, stop: &Stopwords) -> bool {
    a.norm_tokens()
        .iter()
        .filter(|t| !stop.contains(t))
        .any(|t| b.norm_tokens().contains(t))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// Discarded labels per bundle name.
    pub discarded: BTreeMap<String, Vec<String>>,
    /// Training records dropped per bundle name.
    pub dropped_records: BTreeMap<String, usize>,
    /// Bundles whose schema ended up empty.
    pub warnings: Vec<String>,
}

impl OverlapReport {
    pub fn discarded_count(&self, bundle: &str) -> usize {
        self.discarded.get(bundle).map_or(0, Vec::len)
    }
}

/// Removes meta-training labels that overlap any target label, along with
/// every training record that mentions a removed label.
pub fn filter_label_overlap(
    meta: &MetaCorpus,
    target_labels: &BTreeSet<RelationLabel>,
    stop: &Stopwords,
) -> (MetaCorpus, OverlapReport) {
    assert!(!target_labels.is_empty(), "target label set must be nonempty");
    let mut report = OverlapReport::default();
    let mut bundles = Vec::with_capacity(meta.bundles.len());
    for b in &meta.bundles {
        let removed: BTreeSet<RelationLabel> = b
            .schema
            .iter()
            .filter(|l| target_labels.iter().any(|t| labels_overlap(l, t, stop)))
            .cloned()
            .collect();
        let mut nb = b.clone();
        nb.schema.retain(|l| !removed.contains(l));
        let mut dropped = 0;
        if let Some(train) = nb.splits.get_mut(&Split::Train) {
            let before = train.len();
            train.retain(|r| r.triples.iter().all(|t| !removed.contains(&t.predicate)));
            dropped = before - train.len();
        }
        // Dev/test keep only records fully inside the remaining schema.
        for (split, records) in nb.splits.iter_mut() {
            if *split != Split::Train {
                records.retain(|r| r.triples.iter().all(|t| !removed.contains(&t.predicate)));
            }
        }
        if nb.schema.is_empty() {
            report
                .warnings
                .push(format!("bundle {} has an empty schema after filtering", b.name));
        }
        report.discarded.insert(
            b.name.clone(),
            removed.iter().map(|l| l.raw().to_string()).collect(),
        );
        report.dropped_records.insert(b.name.clone(), dropped);
        bundles.push(nb);
    }
    (
        MetaCorpus {
            bundles,
            cap: meta.cap,
        },
        report,
    )
}

/// Raw label to alias mapping produced by [`replace_labels`].
pub type AliasMap = BTreeMap<String, String>;

/// Assigns `R1..RI` to the distinct labels of `labels` in raw lexicographic order.
pub fn alias_map<'a>(labels: impl IntoIterator<Item = &'a RelationLabel>) -> AliasMap {
    let distinct: BTreeSet<&str> = labels.into_iter().map(|l| l.raw()).collect();
    distinct
        .into_iter()
        .enumerate()
        .map(|(i, raw)| (raw.to_string(), format!("R{}", i + 1)))
        .collect()
}

/// Sets aliases on every label occurrence (schema and records) of a bundle.
pub fn apply_aliases(bundle: &DatasetBundle, map: &AliasMap) -> DatasetBundle {
    let relabel = |l: &RelationLabel| match map.get(l.raw()) {
        Some(a) => l.clone().with_alias(a.clone()).expect("generated alias is valid"),
        None => l.clone(),
    };
    let mut out = bundle.clone();
    out.schema = bundle.schema.iter().map(relabel).collect();
    for records in out.splits.values_mut() {
        for r in records {
            for t in &mut r.triples {
                t.predicate = relabel(&t.predicate);
            }
        }
    }
    out
}

/// Replaces every relation label of the corpus with an opaque alias `R{i}`.
pub fn replace_labels(meta: &MetaCorpus) -> (MetaCorpus, AliasMap) {
    let labels: Vec<RelationLabel> = meta
        .bundles
        .iter()
        .flat_map(|b| {
            b.schema
                .iter()
                .cloned()
                .chain(b.splits.values().flatten().flat_map(|r| r.triples.iter().map(|t| t.predicate.clone())))
        })
        .collect();
    let map = alias_map(labels.iter());
    let bundles = meta.bundles.iter().map(|b| apply_aliases(b, &map)).collect();
    (
        MetaCorpus {
            bundles,
            cap: meta.cap,
        },
        map,
    )
}
