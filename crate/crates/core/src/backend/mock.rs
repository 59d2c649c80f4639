use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    truncate_at_stop, Backend, BackendError, GenerateRequest, GenerateResult, ScoreRequest,
    ScoreResult,
};
use crate::toy::vocab::split_words;

/// Per-token log-probability reported for unmatched score requests.
pub const UNMATCHED_TOKEN_LOGPROB: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixtureMatch {
    pub prompt_suffix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(rename = "match")]
    pub matcher: FixtureMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<String>,
}

impl FixtureEntry {
    pub fn score(prompt_suffix: &str, continuation: &str, logprob: f64) -> Self {
        Self {
            matcher: FixtureMatch {
                prompt_suffix: prompt_suffix.into(),
                continuation: Some(continuation.into()),
            },
            logprob: Some(logprob),
            generation: None,
        }
    }

    pub fn generation(prompt_suffix: &str, text: &str, logprob: f64) -> Self {
        Self {
            matcher: FixtureMatch {
                prompt_suffix: prompt_suffix.into(),
                continuation: None,
            },
            logprob: Some(logprob),
            generation: Some(text.into()),
        }
    }
}

/// Fixture-driven deterministic backend.
///
/// Scoring: the entry whose `prompt_suffix` ends the prompt and whose
/// `continuation` equals the request's wins, the longest suffix first; an
/// entry without `continuation` matches any continuation at lower priority.
/// The matched `logprob` is reported as a single step. Unmatched requests
/// score `-1e9` per word token of the continuation.
///
/// Generation: the longest matching suffix among entries that carry a
/// `generation` text; the text is cut at stop strings and `max_tokens` word
/// tokens. No match yields empty text with total 0.
///
/// Scores are not probabilities: entries may report any value.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    entries: Vec<FixtureEntry>,
}

impl MockBackend {
    pub fn new(entries: Vec<FixtureEntry>) -> Result<Self, BackendError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.matcher) {
                return Err(BackendError::Fixture(format!(
                    "duplicate match key {:?}",
                    e.matcher
                )));
            }
            if e.logprob.is_some_and(|l| !l.is_finite()) {
                return Err(BackendError::Fixture(format!(
                    "non-finite logprob for {:?}",
                    e.matcher
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let entries: Vec<FixtureEntry> =
            serde_json::from_str(text).map_err(|e| BackendError::Fixture(e.to_string()))?;
        Self::new(entries)
    }

    pub fn from_fixture(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn entries(&self) -> &[FixtureEntry] {
        &self.entries
    }
}

impl Backend for MockBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        req.check()?;
        let best = self
            .entries
            .iter()
            .filter(|e| e.logprob.is_some() && req.prompt.ends_with(&e.matcher.prompt_suffix))
            .filter(|e| match &e.matcher.continuation {
                Some(c) => *c == req.continuation,
                None => e.generation.is_none(),
            })
            .max_by_key(|e| {
                (
                    e.matcher.continuation.is_some(),
                    e.matcher.prompt_suffix.len(),
                )
            });
        Ok(match best {
            Some(e) => ScoreResult::from_logprobs(vec![e.logprob.expect("filtered")]),
            None => {
                let n = split_words(&req.continuation).len().max(1);
                ScoreResult::from_logprobs(vec![UNMATCHED_TOKEN_LOGPROB; n])
            }
        })
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, BackendError> {
        req.check()?;
        let best = self
            .entries
            .iter()
            .filter(|e| e.generation.is_some() && req.prompt.ends_with(&e.matcher.prompt_suffix))
            .max_by_key(|e| e.matcher.prompt_suffix.len());
        let Some(entry) = best else {
            return Ok(GenerateResult {
                text: String::new(),
                total_logprob: 0.0,
            });
        };
        let mut text = truncate_to_tokens(entry.generation.as_deref().unwrap_or(""), req.max_tokens);
        truncate_at_stop(&mut text, &req.stop);
        Ok(GenerateResult {
            text,
            total_logprob: entry.logprob.unwrap_or(0.0),
        })
    }
}

/// Keeps the prefix of `text` spanning at most `max` word tokens.
fn truncate_to_tokens(text: &str, max: usize) -> String {
    let spans = crate::toy::vocab::split_word_spans(text);
    match spans.get(max) {
        Some(&(start, _)) => text[..start].to_string(),
        None => text.to_string(),
    }
}
