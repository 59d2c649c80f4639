//! Zero- and few-shot RC/RTE prediction by candidate log-probability argmax.
//!
//! Every procedure ranks candidates by score, highest first, breaking ties by
//! the candidate's content key (raw label, or the serialized triple), so the
//! outcome never depends on candidate order.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{candidate_score, Backend, BackendError, GenerateRequest, ScoreRequest};
use crate::codec::{
    join_blocks, parse_continuation_row, parse_table, render_block, render_row, BlockMode,
    HeaderOrder, RowSelection, StringTriple, BLOCK_SEPARATOR,
};
use crate::data::{RERecord, RelationLabel};
use crate::episode::FewShotEpisode;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("{0}")]
    Unsupported(String),
    #[error("scoring mode needs one candidate set per query ({queries} queries, {sets} sets)")]
    CandidateCount { queries: usize, sets: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Candidate {
    Relation(RelationLabel),
    Triple(StringTriple),
}

impl Candidate {
    /// Content key used for tie-breaking.
    pub fn key(&self) -> String {
        match self {
            Candidate::Relation(l) => l.raw().to_string(),
            Candidate::Triple(t) => t.key(),
        }
    }

    pub fn as_relation(&self) -> Option<&RelationLabel> {
        match self {
            Candidate::Relation(l) => Some(l),
            Candidate::Triple(_) => None,
        }
    }

    pub fn as_triple(&self) -> Option<&StringTriple> {
        match self {
            Candidate::Triple(t) => Some(t),
            Candidate::Relation(_) => None,
        }
    }
}

/// A nonempty set of candidates of one kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateSet {
    Relations(Vec<RelationLabel>),
    Triples(Vec<StringTriple>),
}

impl CandidateSet {
    pub fn relations(items: Vec<RelationLabel>) -> Result<Self, InferenceError> {
        if items.is_empty() {
            return Err(InferenceError::EmptyCandidates);
        }
        Ok(Self::Relations(items))
    }

    pub fn triples(items: Vec<StringTriple>) -> Result<Self, InferenceError> {
        if items.is_empty() {
            return Err(InferenceError::EmptyCandidates);
        }
        Ok(Self::Triples(items))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Relations(v) => v.len(),
            Self::Triples(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub item: Candidate,
    pub logprob: f64,
    /// 1 is best.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub query_id: String,
    pub predicted: Option<Candidate>,
    pub scored: Vec<ScoredCandidate>,
    /// Set when generation or parsing failed and nothing could be predicted.
    pub null_flag: bool,
    /// Every predicted triple (generative RTE may yield several rows).
    pub triples: Vec<StringTriple>,
    /// Demonstrations dropped from the front to fit the context.
    pub dropped_demos: usize,
    pub notes: Vec<String>,
}

impl Prediction {
    fn null(query_id: &str, scored: Vec<ScoredCandidate>, note: String) -> Self {
        Self {
            query_id: query_id.to_string(),
            predicted: None,
            scored,
            null_flag: true,
            triples: Vec::new(),
            dropped_demos: 0,
            notes: vec![note],
        }
    }

    fn from_ranked(query_id: &str, scored: Vec<ScoredCandidate>) -> Self {
        let predicted = scored.first().map(|c| c.item.clone());
        let triples = predicted
            .as_ref()
            .and_then(Candidate::as_triple)
            .cloned()
            .into_iter()
            .collect();
        Self {
            query_id: query_id.to_string(),
            null_flag: predicted.is_none(),
            predicted,
            scored,
            triples,
            dropped_demos: 0,
            notes: Vec::new(),
        }
    }

    pub fn predicted_relation(&self) -> Option<&RelationLabel> {
        self.predicted.as_ref().and_then(Candidate::as_relation)
    }

    pub fn predicted_triple(&self) -> Option<&StringTriple> {
        self.predicted.as_ref().and_then(Candidate::as_triple)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RteMode {
    #[default]
    Generative,
    Scoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    /// Score candidates by mean per-step logprob instead of the sum.
    pub length_normalize: bool,
    /// Parallel queries; 1 runs sequentially.
    pub jobs: usize,
    /// Generation budget for RTE.
    pub max_tokens: usize,
    /// Drop generated triples whose spans are not in the sentence.
    pub span_filter: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            length_normalize: false,
            jobs: 1,
            max_tokens: 48,
            span_filter: true,
        }
    }
}

fn compare(a: &(Candidate, f64), b: &(Candidate, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.key().cmp(&b.0.key()))
}

/// Sorts by score (descending), then content key, and assigns ranks.
pub fn rank_candidates(scored: Vec<(Candidate, f64)>) -> Vec<ScoredCandidate> {
    let mut scored = scored;
    scored.sort_by(compare);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (item, logprob))| ScoredCandidate {
            item,
            logprob,
            rank: i + 1,
        })
        .collect()
}

/// Runs `f` over `items` with at most `jobs` threads, keeping input order.
/// Falls back to sequential execution if no pool can be built.
pub fn map_ordered<T, R, E, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    if jobs > 1 && items.len() > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| items.par_iter().map(f).collect());
        }
    }
    items.iter().map(f).collect()
}

/// Calls `f` with the prompt built from `demos[start..]` and `query`,
/// dropping demonstrations from the front while the backend overflows.
fn with_demo_dropping<T>(
    demos: &[String],
    query: &str,
    mut f: impl FnMut(&str) -> Result<T, BackendError>,
) -> Result<(T, usize), BackendError> {
    let mut start = 0;
    loop {
        let prompt = if start == demos.len() {
            query.to_string()
        } else {
            let mut p = join_blocks(&demos[start..]);
            p.push_str(BLOCK_SEPARATOR);
            p.push_str(query);
            p
        };
        match f(&prompt) {
            Err(BackendError::ContextOverflow { .. }) if start < demos.len() => start += 1,
            Err(e) => return Err(e),
            Ok(v) => return Ok((v, start)),
        }
    }
}

fn rc_continuation(label: &RelationLabel, record: &RERecord, order: HeaderOrder) -> String {
    let t = record.designated();
    let cells = order.arrange((label.display(), t.subject.text.as_str(), t.object.text.as_str()));
    // The prompt already ends with the opening delimiter.
    render_row(&cells)[1..].to_string()
}

fn support_blocks(episode: &FewShotEpisode, order: HeaderOrder, selection: RowSelection) -> Vec<String> {
    episode
        .support
        .iter()
        .map(|r| render_block(r, order, &BlockMode::Full, selection).text)
        .collect()
}

/// N-way K-shot relation classification over every query of the episode.
pub fn few_shot_rc<B: Backend + ?Sized>(
    backend: &B,
    episode: &FewShotEpisode,
    order: HeaderOrder,
    opts: &InferenceOptions,
) -> Result<Vec<Prediction>, InferenceError> {
    if episode.candidate_relations.is_empty() {
        return Err(InferenceError::EmptyCandidates);
    }
    let demos = support_blocks(episode, order, RowSelection::Designated);
    map_ordered(&episode.queries, opts.jobs, |q| {
        let query = render_block(q, order, &BlockMode::Partial(Vec::new()), RowSelection::Designated).text;
        let (scored, dropped) = with_demo_dropping(&demos, &query, |prompt| {
            episode
                .candidate_relations
                .iter()
                .map(|r| {
                    let req = ScoreRequest::new(prompt, rc_continuation(r, q, order));
                    Ok((
                        Candidate::Relation(r.clone()),
                        candidate_score(backend, &req, opts.length_normalize)?,
                    ))
                })
                .collect::<Result<Vec<_>, BackendError>>()
        })?;
        let mut p = Prediction::from_ranked(&q.id, rank_candidates(scored));
        p.dropped_demos = dropped;
        Ok(p)
    })
}

fn require_pso(order: HeaderOrder, what: &str) -> Result<(), InferenceError> {
    if order == HeaderOrder::Pso {
        Ok(())
    } else {
        Err(InferenceError::Unsupported(format!(
            "{what} is defined for the Predicate|Subject|Object header only"
        )))
    }
}

/// Zero-shot RC: for each relation `r`, scores the gold object after the
/// partial row `|r|s|`; the relation under which it is likeliest wins.
pub fn zero_shot_rc<B: Backend + ?Sized>(
    backend: &B,
    record: &RERecord,
    candidates: &[RelationLabel],
    order: HeaderOrder,
    opts: &InferenceOptions,
) -> Result<Prediction, InferenceError> {
    require_pso(order, "zero-shot RC")?;
    if candidates.is_empty() {
        return Err(InferenceError::EmptyCandidates);
    }
    let t = record.designated();
    let continuation = render_row(&[t.object.text.as_str()])[1..].to_string();
    let scored = candidates
        .iter()
        .map(|r| {
            let mode = BlockMode::Partial(vec![r.display().to_string(), t.subject.text.clone()]);
            let prompt = render_block(record, order, &mode, RowSelection::Designated).text;
            let req = ScoreRequest::new(prompt, continuation.clone());
            Ok((
                Candidate::Relation(r.clone()),
                candidate_score(backend, &req, opts.length_normalize)?,
            ))
        })
        .collect::<Result<Vec<_>, InferenceError>>()?;
    Ok(Prediction::from_ranked(&record.id, rank_candidates(scored)))
}

fn spans_valid(t: &StringTriple, sentence: &str) -> bool {
    !t.subject.is_empty()
        && !t.object.is_empty()
        && sentence.contains(&t.subject)
        && sentence.contains(&t.object)
}

/// Zero-shot RTE: for each relation, greedily completes `|r|` into a row and
/// keeps the most probable parseable triple.
pub fn zero_shot_rte<B: Backend + ?Sized>(
    backend: &B,
    record: &RERecord,
    candidates: &[RelationLabel],
    order: HeaderOrder,
    opts: &InferenceOptions,
) -> Result<Prediction, InferenceError> {
    require_pso(order, "zero-shot RTE")?;
    if candidates.is_empty() {
        return Err(InferenceError::EmptyCandidates);
    }
    let mut pool = Vec::new();
    let mut failures = Vec::new();
    for r in candidates {
        let given = [r.display().to_string()];
        let prompt = render_block(
            record,
            order,
            &BlockMode::Partial(given.to_vec()),
            RowSelection::Designated,
        )
        .text;
        let out = backend.generate(&GenerateRequest::new(prompt, opts.max_tokens, &["\n"]))?;
        match parse_continuation_row(&out.text, &given, order) {
            Ok(t) => pool.push((Candidate::Triple(t), out.total_logprob)),
            Err(e) => failures.push(format!("{}: {e}", r.raw())),
        }
    }
    if pool.is_empty() {
        return Ok(Prediction::null(
            &record.id,
            Vec::new(),
            format!("no parseable generation ({})", failures.join("; ")),
        ));
    }
    let mut notes = Vec::new();
    if opts.span_filter {
        let kept: Vec<_> = pool
            .iter()
            .filter(|(c, _)| c.as_triple().is_some_and(|t| spans_valid(t, &record.sentence)))
            .cloned()
            .collect();
        if kept.is_empty() {
            notes.push("span filter removed every candidate; using the unfiltered pool".into());
        } else {
            pool = kept;
        }
    }
    let mut p = Prediction::from_ranked(&record.id, rank_candidates(pool));
    p.notes = notes;
    Ok(p)
}

/// Few-shot RTE. Generative mode completes the query table and predicts its
/// first row (all rows are kept in `triples`); scoring mode ranks the given
/// candidate triples per query.
pub fn few_shot_rte<B: Backend + ?Sized>(
    backend: &B,
    episode: &FewShotEpisode,
    order: HeaderOrder,
    mode: RteMode,
    candidates: Option<&[CandidateSet]>,
    opts: &InferenceOptions,
) -> Result<Vec<Prediction>, InferenceError> {
    let demos = support_blocks(episode, order, RowSelection::All);
    match mode {
        RteMode::Generative => map_ordered(&episode.queries, opts.jobs, |q| {
            let query = render_block(q, order, &BlockMode::InputOnly, RowSelection::All).text;
            let (out, dropped) = with_demo_dropping(&demos, &query, |prompt| {
                backend.generate(&GenerateRequest::new(prompt, opts.max_tokens, &["\n\n"]))
            })?;
            let table = format!("{}\n{}", order.header(), out.text);
            let mut p = match parse_table(&table, order) {
                Ok(rows) => {
                    let first = rows[0].clone();
                    let scored = rank_candidates(vec![(Candidate::Triple(first), out.total_logprob)]);
                    let mut p = Prediction::from_ranked(&q.id, scored);
                    p.triples = rows;
                    p
                }
                Err(e) => Prediction::null(&q.id, Vec::new(), e.to_string()),
            };
            p.dropped_demos = dropped;
            Ok(p)
        }),
        RteMode::Scoring => {
            let sets = candidates.ok_or(InferenceError::CandidateCount {
                queries: episode.queries.len(),
                sets: 0,
            })?;
            if sets.len() != episode.queries.len() {
                return Err(InferenceError::CandidateCount {
                    queries: episode.queries.len(),
                    sets: sets.len(),
                });
            }
            let jobs: Vec<(&RERecord, &CandidateSet)> = episode.queries.iter().zip(sets).collect();
            map_ordered(&jobs, opts.jobs, |(q, set)| {
                let CandidateSet::Triples(triples) = set else {
                    return Err(InferenceError::Unsupported(
                        "scoring-mode RTE needs triple candidates".into(),
                    ));
                };
                if triples.is_empty() {
                    return Err(InferenceError::EmptyCandidates);
                }
                let query = render_block(q, order, &BlockMode::InputOnly, RowSelection::All).text;
                let (scored, dropped) = with_demo_dropping(&demos, &query, |prompt| {
                    triples
                        .iter()
                        .map(|t| {
                            let req = ScoreRequest::new(prompt, render_row(&t.cells(order)));
                            Ok((
                                Candidate::Triple(t.clone()),
                                candidate_score(backend, &req, opts.length_normalize)?,
                            ))
                        })
                        .collect::<Result<Vec<_>, BackendError>>()
                })?;
                let mut p = Prediction::from_ranked(&q.id, rank_candidates(scored));
                p.dropped_demos = dropped;
                Ok(p)
            })
        }
    }
}
