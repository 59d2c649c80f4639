use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{
    Backend, BackendError, GenerateRequest, GenerateResult, ScoreRequest, ScoreResult,
};

/// Environment variable holding an optional bearer token.
pub const TOKEN_ENV_VAR: &str = "MICRE_REMOTE_TOKEN";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Additional attempts after the first failure.
    pub retries: u32,
    /// First backoff delay; doubled after every failed attempt.
    pub backoff: Duration,
    pub bearer_token: Option<String>,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            retries: 2,
            backoff: Duration::from_millis(200),
            bearer_token: None,
        }
    }

    /// Picks up the bearer token from [`TOKEN_ENV_VAR`] when set.
    pub fn with_env_token(mut self) -> Self {
        self.bearer_token = std::env::var(TOKEN_ENV_VAR).ok().filter(|t| !t.is_empty());
        self
    }
}

/// JSON-over-HTTP client for an external inference server.
///
/// `POST {base}/v1/score` and `POST {base}/v1/generate`. Transport errors and
/// 5xx responses are retried with exponential backoff; 413 maps to a context
/// overflow; any other failure is reported as unavailable.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct WireScore {
    token_logprobs: Vec<f64>,
    total: f64,
}

#[derive(Deserialize)]
struct WireGenerate {
    text: String,
    total_logprob: f64,
}

#[derive(Deserialize)]
struct WireError {
    error: String,
    #[serde(default)]
    needed: Option<usize>,
    #[serde(default)]
    limit: Option<usize>,
}

#[derive(serde::Serialize)]
struct WireGenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    stop: &'a [String],
}

enum Attempt {
    Retry(String),
    Fail(BackendError),
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
        Self { cfg, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn attempt(&self, url: &str, body: &str) -> Result<String, Attempt> {
        let mut req = self
            .agent
            .post(url)
            .set("Content-Type", "application/json");
        if let Some(token) = &self.cfg.bearer_token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_string(body) {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| Attempt::Retry(format!("reading response: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let wire: Option<WireError> = serde_json::from_str(&text).ok();
                let message = wire
                    .as_ref()
                    .map(|w| w.error.clone())
                    .unwrap_or_else(|| text.clone());
                if code == 413 {
                    return Err(Attempt::Fail(BackendError::ContextOverflow {
                        needed: wire.as_ref().and_then(|w| w.needed).unwrap_or(0),
                        limit: wire.as_ref().and_then(|w| w.limit).unwrap_or(0),
                    }));
                }
                let msg = format!("HTTP {code}: {message}");
                if code >= 500 || code == 429 {
                    Err(Attempt::Retry(msg))
                } else {
                    Err(Attempt::Fail(BackendError::BackendUnavailable(msg)))
                }
            }
            Err(e) => Err(Attempt::Retry(e.to_string())),
        }
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &str) -> Result<T, BackendError> {
        let url = self.url(path);
        let mut delay = self.cfg.backoff;
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
            match self.attempt(&url, body) {
                Ok(text) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| BackendError::ProtocolError(format!("{path}: {e}")))
                }
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::BackendUnavailable(format!(
            "{url}: {} attempts failed, last error: {last}",
            self.cfg.retries + 1
        )))
    }
}

/// Request body for `/v1/score`.
pub fn score_body(req: &ScoreRequest) -> String {
    serde_json::to_string(req).expect("score request serializes")
}

/// Request body for `/v1/generate`.
pub fn generate_body(req: &GenerateRequest) -> String {
    serde_json::to_string(&WireGenerateRequest {
        prompt: &req.prompt,
        max_tokens: req.max_tokens,
        stop: &req.stop,
    })
    .expect("generate request serializes")
}

impl Backend for RemoteBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        req.check()?;
        let wire: WireScore = self.post("/v1/score", &score_body(req))?;
        let sum: f64 = wire.token_logprobs.iter().sum();
        if (sum - wire.total).abs() > 1e-9 * sum.abs().max(1.0) {
            return Err(BackendError::ProtocolError(format!(
                "total {} disagrees with sum of token_logprobs {sum}",
                wire.total
            )));
        }
        Ok(ScoreResult {
            token_logprobs: wire.token_logprobs,
            total: wire.total,
        })
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, BackendError> {
        req.check()?;
        let wire: WireGenerate = self.post("/v1/generate", &generate_body(req))?;
        Ok(GenerateResult {
            text: wire.text,
            total_logprob: wire.total_logprob,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bodies_are_byte_exact() {
        assert_eq!(
            score_body(&ScoreRequest::new("P", "A")),
            r#"{"prompt":"P","continuation":"A"}"#
        );
        assert_eq!(
            generate_body(&GenerateRequest::new("P", 8, &["\n"])),
            r#"{"prompt":"P","max_tokens":8,"stop":["\n"]}"#
        );
    }

    #[test]
    fn unreachable_server_is_unavailable() {
        let mut cfg = RemoteConfig::new("http://127.0.0.1:9");
        cfg.retries = 1;
        cfg.backoff = Duration::from_millis(1);
        cfg.timeout = Duration::from_millis(500);
        let err = RemoteBackend::new(cfg)
            .score(&ScoreRequest::new("P", "A"))
            .unwrap_err();
        assert!(matches!(err, BackendError::BackendUnavailable(_)), "{err}");
    }
}
