//! Policy capability: generate a step, echo-score text, report the top-k
//! next-token distribution.
//!
//! Backends implement [`PolicyBackend`]; callers go through the free
//! functions [`generate_step`], [`score_tokens`] and [`top_k_next`], which
//! enforce the contract (non-empty inputs, finite non-positive logprobs,
//! sorted distinct top-k) regardless of backend.

pub mod fixtures;
pub mod remote;
pub mod stub;
pub mod tabular;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{RunConfig, TokenScore};

pub use remote::{LogBase, RemoteEndpoint, RemotePolicy, ScoringMode};
pub use tabular::{TabularPolicy, TokenId};

/// Logprobs this far above zero are treated as rounding noise and clamped.
const POSITIVE_LOGPROB_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PolicyError {
    /// Transport failure or 5xx that survived all retries.
    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport { attempts: u32, msg: String },
    /// Well-formed client error (4xx); never retried.
    #[error("server rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("backend lacks capability: {0}")]
    Capability(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl PolicyError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, PolicyError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// Hit the stop sequence.
    Stop,
    /// Hit the token cap.
    Length,
    /// The policy ended the whole trajectory.
    Terminal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStep {
    /// Generated text with the stop sequence removed.
    pub text: String,
    /// The policy's own logprobs for the tokens of `text`.
    pub tokens: Vec<TokenScore>,
    pub finish: FinishReason,
    /// Tokens consumed by the request, including a stop/terminal token.
    pub generated_tokens: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateRequest<'a> {
    pub context: &'a str,
    /// `None` generates to trajectory completion.
    pub stop: Option<&'a str>,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

pub trait PolicyBackend: Send + Sync {
    /// Human-readable identity for manifests (fixture name or endpoint).
    fn identity(&self) -> String;

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GeneratedStep, PolicyError>;

    /// Scores `text` as a continuation of `context` using this policy's own
    /// segmentation.
    fn score(&self, context: &str, text: &str) -> Result<Vec<TokenScore>, PolicyError>;

    fn top_k(&self, context: &str, k: usize) -> Result<Vec<(String, f64)>, PolicyError>;
}

impl<T: PolicyBackend + ?Sized> PolicyBackend for Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GeneratedStep, PolicyError> {
        (**self).generate(req)
    }
    fn score(&self, context: &str, text: &str) -> Result<Vec<TokenScore>, PolicyError> {
        (**self).score(context, text)
    }
    fn top_k(&self, context: &str, k: usize) -> Result<Vec<(String, f64)>, PolicyError> {
        (**self).top_k(context, k)
    }
}

fn sanitize_logprob(lp: f64, what: &str) -> Result<f64, PolicyError> {
    if !lp.is_finite() {
        return Err(PolicyError::Protocol(format!("{what}: non-finite logprob {lp}")));
    }
    if lp > POSITIVE_LOGPROB_SLACK {
        return Err(PolicyError::Protocol(format!("{what}: positive logprob {lp}")));
    }
    Ok(lp.min(0.0))
}

/// Generates one step. Text never contains the stop sequence.
pub fn generate_step(backend: &dyn PolicyBackend, req: &GenerateRequest<'_>) -> Result<GeneratedStep, PolicyError> {
    if req.context.is_empty() {
        return Err(PolicyError::InvalidInput("generation context is empty".into()));
    }
    if req.max_tokens == 0 {
        return Err(PolicyError::InvalidInput("max_tokens must be positive".into()));
    }
    let mut step = backend.generate(req)?;
    if let Some(stop) = req.stop {
        if let Some(pos) = step.text.find(stop) {
            step.text.truncate(pos);
            step.finish = FinishReason::Stop;
        }
    }
    for t in &mut step.tokens {
        t.logprob = sanitize_logprob(t.logprob, "generated token")?;
    }
    Ok(step)
}

/// Convenience wrapper building the request from a [`RunConfig`].
pub fn generate_with_config(
    backend: &dyn PolicyBackend,
    context: &str,
    cfg: &RunConfig,
    temperature: f64,
    seed: u64,
) -> Result<GeneratedStep, PolicyError> {
    generate_step(
        backend,
        &GenerateRequest {
            context,
            stop: Some(&cfg.stop_sequence),
            max_tokens: cfg.max_step_tokens,
            temperature,
            seed,
        },
    )
}

/// Per-token logprobs of `step_text` given `context`.
pub fn score_tokens(backend: &dyn PolicyBackend, context: &str, step_text: &str) -> Result<Vec<TokenScore>, PolicyError> {
    if step_text.is_empty() {
        return Err(PolicyError::InvalidInput("cannot score empty text".into()));
    }
    let mut scores = backend.score(context, step_text)?;
    if scores.is_empty() {
        return Err(PolicyError::Protocol("scoring returned no tokens".into()));
    }
    for t in &mut scores {
        t.logprob = sanitize_logprob(t.logprob, "scored token")?;
    }
    Ok(scores)
}

/// Top-k next-token candidates sorted by logprob, highest first. Fewer than
/// two candidates is a degenerate distribution (entropy 0) and is logged,
/// not rejected.
pub fn top_k_next(backend: &dyn PolicyBackend, context: &str, k: usize) -> Result<Vec<(String, f64)>, PolicyError> {
    if k < 2 {
        return Err(PolicyError::InvalidInput(format!("top-k width {k} < 2")));
    }
    let mut dist = backend.top_k(context, k)?;
    for (_, lp) in &mut dist {
        *lp = sanitize_logprob(*lp, "top-k entry")?;
    }
    // Stable sort keeps server order among ties.
    dist.sort_by(|a, b| b.1.total_cmp(&a.1));
    dist.truncate(k);
    let mut seen = std::collections::HashSet::new();
    if let Some((tok, _)) = dist.iter().find(|(t, _)| !seen.insert(t.clone())) {
        return Err(PolicyError::Protocol(format!("duplicate top-k token {tok:?}")));
    }
    if dist.is_empty() {
        return Err(PolicyError::Protocol("top-k distribution is empty".into()));
    }
    if dist.len() < 2 {
        tracing::debug!("degenerate top-k distribution at context of {} bytes", context.len());
    }
    Ok(dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Student,
    Teacher,
    /// Randomness owned by a baseline rule (e.g. ImitKD's source draws).
    Rule,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Student => 1,
            Role::Teacher => 2,
            Role::Rule => 3,
        }
    }
}

/// Counter-style seed keyed by `(seed, role, question, sample, step)`, so a
/// trajectory's randomness is independent of scheduling.
pub fn derive_seed(base: u64, role: Role, question_id: &str, sample_index: u64, step: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update([role.tag()]);
    h.update((question_id.len() as u64).to_le_bytes());
    h.update(question_id.as_bytes());
    h.update(sample_index.to_le_bytes());
    h.update(step.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
