use super::model::{next_token_logprobs, Parameters, Prepared, Projected};
use super::vocab::{Vocab, EOS, PAD};
use crate::backend::{
    truncate_at_stop, Backend, BackendError, GenerateRequest, GenerateResult, ScoreRequest,
    ScoreResult,
};
use crate::episode::{TokenId, Tokenizer};

/// Serves a trained (or freshly initialized) toy model through the backend
/// contract. Parameters are read-only once wrapped.
pub struct ToyBackend {
    params: Parameters,
    proj: Option<Projected>,
    vocab: Vocab,
    block_size: usize,
}

impl ToyBackend {
    pub fn new(params: Parameters, vocab: Vocab, block_size: usize) -> Result<Self, BackendError> {
        params
            .check_shapes()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        if params.vocab_size != vocab.len() {
            return Err(BackendError::InvalidRequest(format!(
                "model vocabulary {} does not match tokenizer vocabulary {}",
                params.vocab_size,
                vocab.len()
            )));
        }
        let proj = params.project();
        Ok(Self {
            params,
            proj,
            vocab,
            block_size,
        })
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn prepared(&self) -> Prepared<'_> {
        Prepared::new(&self.params, self.proj.as_ref())
    }

    /// Full next-token distribution (log space) after `prompt`.
    pub fn next_token_distribution(&self, prompt: &str) -> Vec<f64> {
        next_token_logprobs(&self.prepared(), &self.vocab.encode(prompt))
    }

    fn overflow(&self, needed: usize) -> Result<(), BackendError> {
        if needed > self.block_size {
            Err(BackendError::ContextOverflow {
                needed,
                limit: self.block_size,
            })
        } else {
            Ok(())
        }
    }
}

/// Greedy choice: highest logprob, lowest id on ties; padding is never emitted.
fn argmax(logprobs: &[f64]) -> TokenId {
    let mut best = None::<(usize, f64)>;
    for (i, &l) in logprobs.iter().enumerate() {
        if i as TokenId == PAD {
            continue;
        }
        if best.map_or(true, |(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    best.expect("vocabulary has non-pad tokens").0 as TokenId
}

impl Backend for ToyBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        req.check()?;
        let mut tokens = self.vocab.encode(&req.prompt);
        let prompt_len = tokens.len();
        let cont = self.vocab.encode(&req.continuation);
        if cont.is_empty() {
            return Err(BackendError::InvalidRequest(
                "continuation has no tokens".into(),
            ));
        }
        tokens.extend_from_slice(&cont);
        self.overflow(tokens.len())?;
        let prep = self.prepared();
        let logprobs = cont
            .iter()
            .enumerate()
            .map(|(j, &t)| next_token_logprobs(&prep, &tokens[..prompt_len + j])[t as usize])
            .collect();
        Ok(ScoreResult::from_logprobs(logprobs))
    }

    /// Greedy decoding. `total_logprob` includes the token that triggered a
    /// stop string or EOS; the returned text excludes them.
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, BackendError> {
        req.check()?;
        let mut tokens = self.vocab.encode(&req.prompt);
        self.overflow(tokens.len())?;
        let prompt_len = tokens.len();
        let prep = self.prepared();
        let mut total = 0.0;
        let mut text = String::new();
        for _ in 0..req.max_tokens {
            if tokens.len() >= self.block_size {
                break;
            }
            let lp = next_token_logprobs(&prep, &tokens);
            let next = argmax(&lp);
            total += lp[next as usize];
            if next == EOS {
                break;
            }
            tokens.push(next);
            text = self.vocab.decode(&tokens[prompt_len..]);
            if truncate_at_stop(&mut text, &req.stop) {
                break;
            }
        }
        Ok(GenerateResult {
            text,
            total_logprob: total,
        })
    }
}
