//! OpenAI-compatible `/completions` client.
//!
//! Generation uses a plain completion with `logprobs = 1`. Scoring echoes
//! `context + text` back with logprobs and keeps the tokens that overlap
//! `text`; servers without echo can be scored one token at a time.

use std::fmt;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{FinishReason, GenerateRequest, GeneratedStep, PolicyBackend, PolicyError};
use crate::types::TokenScore;

/// Candidates requested per position by the incremental scorer.
const INCREMENTAL_TOP: usize = 20;

#[derive(Clone, PartialEq, Eq)]
pub struct RemoteEndpoint {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model_name: String,
    pub auth_token: Option<String>,
    pub request_timeout: Duration,
    pub max_retries: u32,
    /// Sleep before retry `i` is `backoff[min(i, len - 1)]`; empty means no sleep.
    pub backoff: Vec<Duration>,
}

impl RemoteEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_token: None,
            request_timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff: vec![Duration::from_millis(500), Duration::from_secs(2), Duration::from_secs(8)],
        }
    }

    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/completions") {
            base.to_string()
        } else {
            format!("{base}/completions")
        }
    }

    fn backoff_for(&self, retry: usize) -> Duration {
        match self.backoff.len() {
            0 => Duration::ZERO,
            n => self.backoff[retry.min(n - 1)],
        }
    }
}

impl fmt::Debug for RemoteEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteEndpoint")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .field("request_timeout", &self.request_timeout)
            .field("max_retries", &self.max_retries)
            .field("backoff", &self.backoff)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    Echo,
    Incremental,
    /// Echo, falling back to incremental when the server cannot echo.
    Auto,
}

/// Base of the logarithm the server reports in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    Natural,
    Two,
    Ten,
}

impl LogBase {
    fn to_natural(self, lp: f64) -> f64 {
        match self {
            LogBase::Natural => lp,
            LogBase::Two => lp * std::f64::consts::LN_2,
            LogBase::Ten => lp * std::f64::consts::LN_10,
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    stop: Vec<&'a str>,
    logprobs: usize,
    echo: bool,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    completion_tokens: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<Value>>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

pub struct RemotePolicy {
    endpoint: RemoteEndpoint,
    client: Client,
    scoring: ScoringMode,
    log_base: LogBase,
}

impl fmt::Debug for RemotePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemotePolicy")
            .field("endpoint", &self.endpoint)
            .field("scoring", &self.scoring)
            .field("log_base", &self.log_base)
            .finish()
    }
}

impl RemotePolicy {
    pub fn new(endpoint: RemoteEndpoint) -> Result<Self, PolicyError> {
        let client = Client::builder()
            .timeout(endpoint.request_timeout)
            .build()
            .map_err(|e| PolicyError::InvalidInput(format!("http client: {e}")))?;
        Ok(Self { endpoint, client, scoring: ScoringMode::Auto, log_base: LogBase::Natural })
    }

    pub fn with_scoring(mut self, mode: ScoringMode) -> Self {
        self.scoring = mode;
        self
    }

    pub fn with_log_base(mut self, base: LogBase) -> Self {
        self.log_base = base;
        self
    }

    pub fn endpoint(&self) -> &RemoteEndpoint {
        &self.endpoint
    }

    fn post(&self, req: &CompletionRequest<'_>) -> Result<CompletionResponse, PolicyError> {
        let url = self.endpoint.completions_url();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let mut builder = self.client.post(&url).json(req);
            if let Some(token) = &self.endpoint.auth_token {
                builder = builder.bearer_auth(token);
            }
            let failure = match builder.send() {
                Err(e) => format!("request failed: {e}"),
                Ok(resp) => {
                    let status = resp.status();
                    let body = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return serde_json::from_str(&body)
                            .map_err(|e| PolicyError::Protocol(format!("bad completion body: {e}")));
                    }
                    if status.is_client_error() {
                        return Err(PolicyError::Rejected { status: status.as_u16(), body });
                    }
                    if !status.is_server_error() {
                        return Err(PolicyError::Protocol(format!("unexpected status {status}")));
                    }
                    server_error(status, &body)
                }
            };
            if attempts > self.endpoint.max_retries {
                return Err(PolicyError::Transport { attempts, msg: failure });
            }
            tracing::warn!(attempt = attempts, "retrying completion request: {failure}");
            std::thread::sleep(self.endpoint.backoff_for(attempts as usize - 1));
        }
    }

    fn request<'a>(&'a self, prompt: &'a str, max_tokens: usize, logprobs: usize, echo: bool) -> CompletionRequest<'a> {
        CompletionRequest {
            model: &self.endpoint.model_name,
            prompt,
            max_tokens,
            temperature: 0.0,
            stop: Vec::new(),
            logprobs,
            echo,
            seed: 0,
        }
    }

    fn first_choice(resp: CompletionResponse) -> Result<(Choice, Option<Usage>), PolicyError> {
        let usage = resp.usage;
        resp.choices
            .into_iter()
            .next()
            .map(|c| (c, usage))
            .ok_or_else(|| PolicyError::Protocol("response has no choices".into()))
    }

    fn token_lps(&self, lp: &Logprobs) -> Result<Vec<(String, Option<f64>)>, PolicyError> {
        if lp.tokens.len() != lp.token_logprobs.len() {
            return Err(PolicyError::Protocol(format!(
                "{} tokens but {} token_logprobs",
                lp.tokens.len(),
                lp.token_logprobs.len()
            )));
        }
        Ok(lp
            .tokens
            .iter()
            .zip(&lp.token_logprobs)
            .map(|(t, l)| (t.clone(), l.map(|x| self.log_base.to_natural(x))))
            .collect())
    }

    fn parse_top(&self, entry: &Value) -> Result<Vec<(String, f64)>, PolicyError> {
        let mut out = Vec::new();
        match entry {
            Value::Object(map) => {
                for (tok, lp) in map {
                    let lp = lp.as_f64().ok_or_else(|| PolicyError::Protocol(format!("top logprob for {tok:?} not a number")))?;
                    out.push((tok.clone(), self.log_base.to_natural(lp)));
                }
            }
            Value::Array(items) => {
                for item in items {
                    let tok = item.get("token").and_then(Value::as_str);
                    let lp = item.get("logprob").and_then(Value::as_f64);
                    match (tok, lp) {
                        (Some(t), Some(l)) => out.push((t.to_string(), self.log_base.to_natural(l))),
                        _ => return Err(PolicyError::Protocol(format!("bad top logprob entry {item}"))),
                    }
                }
            }
            Value::Null => {}
            other => return Err(PolicyError::Protocol(format!("bad top_logprobs entry {other}"))),
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        // Distinct ids can decode to the same string; keep the likeliest.
        let mut seen = std::collections::HashSet::new();
        out.retain(|(t, _)| seen.insert(t.clone()));
        Ok(out)
    }

    fn finish_reason(choice: &Choice, stop_requested: bool) -> Result<FinishReason, PolicyError> {
        match choice.finish_reason.as_deref() {
            Some("length") => Ok(FinishReason::Length),
            Some("stop") | Some("eos") => {
                // vLLM and SGLang report which stop fired: a string for a stop
                // sequence, null or a token id for end-of-sequence.
                let matched = choice.extra.get("stop_reason").or_else(|| choice.extra.get("matched_stop"));
                Ok(match matched {
                    Some(Value::String(_)) => FinishReason::Stop,
                    Some(Value::Null) | Some(Value::Number(_)) => FinishReason::Terminal,
                    _ if stop_requested => FinishReason::Stop,
                    _ => FinishReason::Terminal,
                })
            }
            Some(other) => Err(PolicyError::Protocol(format!("unknown finish_reason {other:?}"))),
            None => Err(PolicyError::Protocol("missing finish_reason".into())),
        }
    }

    fn score_echo(&self, context: &str, text: &str) -> Result<Vec<TokenScore>, PolicyError> {
        let prompt = format!("{context}{text}");
        let resp = self.post(&self.request(&prompt, 1, 1, true))?;
        let (choice, _) = Self::first_choice(resp)?;
        let lp = choice
            .logprobs
            .as_ref()
            .ok_or_else(|| PolicyError::Capability("server returned no logprobs for echo".into()))?;
        let toks = self.token_lps(lp)?;
        let offsets: Vec<usize> = match &lp.text_offset {
            Some(o) if o.len() == toks.len() => o.clone(),
            _ => toks
                .iter()
                .scan(0usize, |acc, (t, _)| {
                    let start = *acc;
                    *acc += t.len();
                    Some(start)
                })
                .collect(),
        };
        let covered: usize = toks.iter().map(|(t, _)| t.len()).sum();
        if covered < prompt.len() {
            return Err(PolicyError::Capability("server did not echo the prompt".into()));
        }
        let mut out = Vec::new();
        for ((tok, lp), start) in toks.iter().zip(offsets) {
            let end = start + tok.len();
            if start < prompt.len() && end > context.len() {
                let lp = lp.ok_or_else(|| PolicyError::Protocol("echoed step token has null logprob".into()))?;
                out.push(TokenScore::new(tok.clone(), lp));
            }
        }
        if out.is_empty() {
            return Err(PolicyError::Capability("echo covered no step tokens".into()));
        }
        Ok(out)
    }

    fn score_incremental(&self, context: &str, text: &str) -> Result<Vec<TokenScore>, PolicyError> {
        let mut out = Vec::new();
        let mut consumed = 0;
        while consumed < text.len() {
            let prompt = format!("{context}{}", &text[..consumed]);
            let resp = self.post(&self.request(&prompt, 1, INCREMENTAL_TOP, false))?;
            let (choice, _) = Self::first_choice(resp)?;
            let lp = choice
                .logprobs
                .as_ref()
                .ok_or_else(|| PolicyError::Protocol("response has no logprobs".into()))?;
            let mut candidates = match lp.top_logprobs.as_ref().and_then(|v| v.first()) {
                Some(Some(entry)) => self.parse_top(entry)?,
                _ => Vec::new(),
            };
            if let Some((tok, Some(l))) = self.token_lps(lp)?.into_iter().next() {
                candidates.push((tok, l));
            }
            let rest = &text[consumed..];
            let best = candidates
                .into_iter()
                .filter(|(t, _)| !t.is_empty() && rest.starts_with(t.as_str()))
                .max_by_key(|(t, _)| t.len())
                .ok_or_else(|| {
                    PolicyError::Capability(format!("no top-{INCREMENTAL_TOP} candidate matches text at byte {consumed}"))
                })?;
            consumed += best.0.len();
            out.push(TokenScore::new(best.0, best.1));
        }
        Ok(out)
    }
}

fn server_error(status: StatusCode, body: &str) -> String {
    let snippet: String = body.chars().take(200).collect();
    format!("server error {status}: {snippet}")
}

impl PolicyBackend for RemotePolicy {
    fn identity(&self) -> String {
        format!("remote:{}@{}", self.endpoint.model_name, self.endpoint.base_url)
    }

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GeneratedStep, PolicyError> {
        let body = CompletionRequest {
            model: &self.endpoint.model_name,
            prompt: req.context,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            stop: req.stop.into_iter().collect(),
            logprobs: 1,
            echo: false,
            seed: req.seed,
        };
        let (choice, usage) = Self::first_choice(self.post(&body)?)?;
        let finish = Self::finish_reason(&choice, req.stop.is_some())?;
        let mut tokens = Vec::new();
        if let Some(lp) = &choice.logprobs {
            let mut covered = 0;
            for (tok, l) in self.token_lps(lp)? {
                if covered >= choice.text.len() {
                    break;
                }
                covered += tok.len();
                let l = l.ok_or_else(|| PolicyError::Protocol("generated token has null logprob".into()))?;
                tokens.push(TokenScore::new(tok, l));
            }
        }
        let generated_tokens = usage.and_then(|u| u.completion_tokens).unwrap_or(tokens.len());
        Ok(GeneratedStep { text: choice.text, tokens, finish, generated_tokens })
    }

    fn score(&self, context: &str, text: &str) -> Result<Vec<TokenScore>, PolicyError> {
        match self.scoring {
            ScoringMode::Echo => self.score_echo(context, text),
            ScoringMode::Incremental => self.score_incremental(context, text),
            ScoringMode::Auto => match self.score_echo(context, text) {
                Err(PolicyError::Capability(msg)) => {
                    tracing::warn!("echo scoring unavailable ({msg}); scoring incrementally");
                    self.score_incremental(context, text)
                }
                other => other,
            },
        }
    }

    fn top_k(&self, context: &str, k: usize) -> Result<Vec<(String, f64)>, PolicyError> {
        let resp = self.post(&self.request(context, 1, k, false))?;
        let (choice, _) = Self::first_choice(resp)?;
        let entry = choice
            .logprobs
            .as_ref()
            .and_then(|lp| lp.top_logprobs.as_ref())
            .and_then(|v| v.first().cloned().flatten())
            .ok_or_else(|| PolicyError::Protocol("response has no top_logprobs".into()))?;
        self.parse_top(&entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_building() {
        assert_eq!(RemoteEndpoint::new("http://h/v1/", "m").completions_url(), "http://h/v1/completions");
        assert_eq!(RemoteEndpoint::new("http://h/v1/completions", "m").completions_url(), "http://h/v1/completions");
    }

    #[test]
    fn debug_redacts_token() {
        let mut e = RemoteEndpoint::new("http://h/v1", "m");
        e.auth_token = Some("sk-secret".into());
        let s = format!("{e:?}");
        assert!(!s.contains("sk-secret"));
        assert!(s.contains("redacted"));
    }

    #[test]
    fn backoff_saturates() {
        let mut e = RemoteEndpoint::new("http://h", "m");
        e.backoff = vec![Duration::from_millis(1), Duration::from_millis(5)];
        assert_eq!(e.backoff_for(0), Duration::from_millis(1));
        assert_eq!(e.backoff_for(7), Duration::from_millis(5));
        e.backoff.clear();
        assert_eq!(e.backoff_for(3), Duration::ZERO);
    }

    #[test]
    fn log_base_conversion() {
        assert!((LogBase::Two.to_natural(-1.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((LogBase::Ten.to_natural(-1.0) - 0.1f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn top_logprobs_accepts_map_and_list() {
        let p = RemotePolicy::new(RemoteEndpoint::new("http://h", "m")).unwrap();
        let m = p.parse_top(&serde_json::json!({"a": -2.0, "b": -0.5})).unwrap();
        assert_eq!(m, vec![("b".to_string(), -0.5), ("a".to_string(), -2.0)]);
        let l = p
            .parse_top(&serde_json::json!([{"token": "a", "logprob": -2.0}, {"token": "b", "logprob": -0.5}, {"token": "a", "logprob": -3.0}]))
            .unwrap();
        assert_eq!(l, m);
    }

    fn choice(finish: &str, extra: Value) -> Choice {
        let mut v = serde_json::json!({"text": "x", "finish_reason": finish});
        if let (Value::Object(a), Value::Object(b)) = (&mut v, extra) {
            a.extend(b);
        }
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn finish_reason_mapping() {
        use FinishReason::*;
        let f = RemotePolicy::finish_reason;
        assert_eq!(f(&choice("length", Value::Null), true).unwrap(), Length);
        assert_eq!(f(&choice("stop", serde_json::json!({"stop_reason": ".\n\n"})), true).unwrap(), Stop);
        assert_eq!(f(&choice("stop", serde_json::json!({"stop_reason": null})), true).unwrap(), Terminal);
        assert_eq!(f(&choice("stop", serde_json::json!({"matched_stop": 2})), true).unwrap(), Terminal);
        assert_eq!(f(&choice("stop", serde_json::json!({})), true).unwrap(), Stop);
        assert_eq!(f(&choice("stop", serde_json::json!({})), false).unwrap(), Terminal);
        assert!(f(&choice("weird", serde_json::json!({})), false).is_err());
    }
}
