//! Scoring and generation backends.
//!
//! Every backend answers two questions: the teacher-forced log-probability of
//! a continuation given a prompt, and a greedy continuation of a prompt.

mod mock;
mod remote;

pub use mock::{FixtureEntry, FixtureMatch, MockBackend, UNMATCHED_TOKEN_LOGPROB};
pub use remote::{RemoteBackend, RemoteConfig, TOKEN_ENV_VAR};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("context overflow: {needed} tokens exceed the limit of {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub continuation: String,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>, continuation: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            continuation: continuation.into(),
        }
    }

    pub fn check(&self) -> Result<(), BackendError> {
        if self.continuation.is_empty() {
            return Err(BackendError::InvalidRequest("empty continuation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// Natural-log probabilities, one per scored step.
    pub token_logprobs: Vec<f64>,
    pub total: f64,
}

impl ScoreResult {
    pub fn from_logprobs(token_logprobs: Vec<f64>) -> Self {
        let total = token_logprobs.iter().sum();
        Self {
            token_logprobs,
            total,
        }
    }

    /// Mean log-probability per scored step.
    pub fn mean(&self) -> f64 {
        if self.token_logprobs.is_empty() {
            0.0
        } else {
            self.total / self.token_logprobs.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub stop: Vec<String>,
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize, stop: &[&str]) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            stop: stop.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn check(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub text: String,
    pub total_logprob: f64,
}

/// Truncates `text` at the earliest occurrence of any stop string.
/// Returns whether a stop string was found.
pub fn truncate_at_stop(text: &mut String, stop: &[String]) -> bool {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => {
            text.truncate(i);
            true
        }
        None => false,
    }
}

pub trait Backend: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, BackendError>;
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        (**self).score(req)
    }
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, BackendError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        (**self).score(req)
    }
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, BackendError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        (**self).score(req)
    }
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, BackendError> {
        (**self).generate(req)
    }
}

/// Scores `req` with per-step length normalization when `normalize` is set.
pub fn candidate_score<B: Backend + ?Sized>(
    backend: &B,
    req: &ScoreRequest,
    normalize: bool,
) -> Result<f64, BackendError> {
    let r = backend.score(req)?;
    Ok(if normalize { r.mean() } else { r.total })
}
