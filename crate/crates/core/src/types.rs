//! Domain types shared across the engine.
//!
//! Everything here is a plain value object. Log-probabilities are natural
//! log, step indices are 1-based, and token counts are whatever the policy
//! backend reports.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::f17;
use crate::stitch::{self, StitchSpec};

/// Tolerance for `value == exp(mean logprob)` checks.
pub const VALUE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), metadata: BTreeMap::new() }
    }
}

/// One token and its natural-log probability under some policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    #[serde(with = "f17")]
    pub logprob: f64,
}

impl TokenScore {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self { token: token.into(), logprob }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    Student,
    Teacher,
}

/// Which synthesis rule produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Motab,
    Skd,
    Imitkd,
    /// Student-only rollout; the teacher scores each step but never intervenes.
    Plain,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Motab => "motab",
            Method::Skd => "skd",
            Method::Imitkd => "imitkd",
            Method::Plain => "plain",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "motab" => Ok(Method::Motab),
            "skd" => Ok(Method::Skd),
            "imitkd" => Ok(Method::Imitkd),
            "plain" => Ok(Method::Plain),
            other => Err(format!("unknown method `{other}` (expected motab, skd, imitkd or plain)")),
        }
    }
}

/// A monitored reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub text: String,
    pub token_scores: Vec<TokenScore>,
    #[serde(with = "f17")]
    pub value: f64,
    #[serde(with = "f17")]
    pub entropy: f64,
    #[serde(with = "f17")]
    pub threshold: f64,
    pub safe: bool,
    pub source: StepSource,
    /// Tokens the generating policy reported for this step, stop token included.
    pub token_count: usize,
}

impl StepRecord {
    /// Checks the record's internal invariants. `gamma0` and `top_k` tighten
    /// the threshold and entropy bounds when known.
    pub fn validate(&self, gamma0: Option<f64>, top_k: Option<usize>) -> Result<(), ValidationError> {
        let bad = |msg: String| Err(ValidationError::Step { index: self.index, msg });
        if self.index == 0 {
            return bad("step index must be 1-based".into());
        }
        if !(0.0..=1.0).contains(&self.value) {
            return bad(format!("value {} outside [0, 1]", self.value));
        }
        if !self.token_scores.is_empty() {
            let mean = self.token_scores.iter().map(|t| t.logprob).sum::<f64>()
                / self.token_scores.len() as f64;
            if (mean.exp() - self.value).abs() > VALUE_TOLERANCE {
                return bad(format!("value {} != exp(mean logprob) {}", self.value, mean.exp()));
            }
        }
        if !(self.threshold > 0.0 && self.threshold <= gamma0.unwrap_or(1.0)) {
            return bad(format!("threshold {} outside (0, gamma0]", self.threshold));
        }
        if self.safe != (self.value >= self.threshold) {
            return bad(format!(
                "safe flag {} disagrees with value {} vs threshold {}",
                self.safe, self.value, self.threshold
            ));
        }
        let max_h = top_k.map_or(f64::INFINITY, |k| (k as f64).ln() + 1e-12);
        if !(self.entropy >= 0.0 && self.entropy <= max_h) {
            return bad(format!("entropy {} outside [0, ln k]", self.entropy));
        }
        Ok(())
    }
}

/// Generation / verification accounting for one trajectory or a whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub student_gen_calls: u64,
    pub student_gen_tokens: u64,
    pub teacher_score_calls: u64,
    pub teacher_scored_tokens: u64,
    pub teacher_topk_calls: u64,
    pub teacher_gen_calls: u64,
    pub teacher_gen_tokens: u64,
}

impl CallCounters {
    pub fn add(&mut self, other: &CallCounters) {
        self.student_gen_calls += other.student_gen_calls;
        self.student_gen_tokens += other.student_gen_tokens;
        self.teacher_score_calls += other.teacher_score_calls;
        self.teacher_scored_tokens += other.teacher_scored_tokens;
        self.teacher_topk_calls += other.teacher_topk_calls;
        self.teacher_gen_calls += other.teacher_gen_calls;
        self.teacher_gen_tokens += other.teacher_gen_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Completed,
    Revised,
    TruncatedLength,
    Failed,
}

impl Terminal {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::Completed => "completed",
            Terminal::Revised => "revised",
            Terminal::TruncatedLength => "truncated_length",
            Terminal::Failed => "failed",
        }
    }
}

/// A synthesized training trajectory with full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTrajectory {
    pub question_id: String,
    pub sample_index: u64,
    pub method: Method,
    pub prompt: String,
    pub separator: String,
    pub student_steps: Vec<StepRecord>,
    pub revised: bool,
    pub rev_token: Option<String>,
    pub teacher_suffix: Option<String>,
    pub unsafe_step: Option<usize>,
    pub backtrack_point: Option<usize>,
    pub td_errors: Option<Vec<f64>>,
    pub terminal: Terminal,
    pub counters: CallCounters,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SynthTrajectory {
    pub fn depth(&self) -> Option<usize> {
        match (self.unsafe_step, self.backtrack_point) {
            (Some(l), Some(ls)) => l.checked_sub(ls),
            _ => None,
        }
    }

    pub fn step_texts(&self) -> Vec<&str> {
        self.student_steps.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn stitch_spec(&self) -> StitchSpec {
        StitchSpec {
            rev_token: self.rev_token.clone().unwrap_or_else(|| StitchSpec::default().rev_token),
            separator: self.separator.clone(),
        }
    }

    /// Everything after the prompt.
    pub fn completion(&self) -> String {
        let steps = self.step_texts();
        match (&self.rev_token, &self.teacher_suffix) {
            (Some(_), Some(suffix)) if self.revised => {
                stitch::stitched_completion(&steps, suffix, &self.stitch_spec())
            }
            _ => stitch::join_steps(&steps, &self.separator),
        }
    }

    /// Prompt followed by completion.
    pub fn text(&self) -> String {
        let mut s = self.prompt.clone();
        s.push_str(&self.completion());
        s
    }

    /// Checks trajectory-level invariants without any policy access.
    pub fn validate(&self, gamma0: Option<f64>, top_k: Option<usize>) -> Result<(), ValidationError> {
        for (i, step) in self.student_steps.iter().enumerate() {
            if step.index != i + 1 {
                return Err(ValidationError::NonContiguous { expected: i + 1, found: step.index });
            }
            let g0 = if self.method == Method::Motab || self.method == Method::Plain { gamma0 } else { None };
            step.validate(g0, top_k)?;
        }
        if self.revised {
            let (Some(_), Some(_), Some(l), Some(ls)) =
                (&self.rev_token, &self.teacher_suffix, self.unsafe_step, self.backtrack_point)
            else {
                return Err(ValidationError::MissingRevisionField);
            };
            if self.rev_token.as_deref().is_some_and(str::is_empty) {
                return Err(ValidationError::MissingRevisionField);
            }
            if ls == 0 || ls > l {
                return Err(ValidationError::BacktrackAfterBreach { unsafe_step: l, backtrack_point: ls });
            }
            if l != self.student_steps.len() {
                return Err(ValidationError::BreachNotLast { unsafe_step: l, steps: self.student_steps.len() });
            }
            if self.student_steps[l - 1].safe {
                return Err(ValidationError::BreachMarkedSafe(l));
            }
            if let Some(i) = self.student_steps[..l - 1].iter().position(|s| !s.safe) {
                return Err(ValidationError::UnsafeBeforeBreach(i + 1));
            }
            if let Some(td) = &self.td_errors {
                if td.len() != l {
                    return Err(ValidationError::TdLength { expected: l, found: td.len() });
                }
            }
        } else {
            if self.method == Method::Motab {
                if let Some(s) = self.student_steps.iter().find(|s| !s.safe) {
                    return Err(ValidationError::UnsafeWithoutRevision(s.index));
                }
            }
            if self.teacher_suffix.is_some() || self.unsafe_step.is_some() || self.backtrack_point.is_some() {
                return Err(ValidationError::StrayRevisionField);
            }
        }
        if self.terminal == Terminal::Revised && !self.revised {
            return Err(ValidationError::TerminalMismatch(self.terminal));
        }
        if self.terminal == Terminal::Completed && self.revised {
            return Err(ValidationError::TerminalMismatch(self.terminal));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("step {index}: {msg}")]
    Step { index: usize, msg: String },
    #[error("step indices not contiguous: expected {expected}, found {found}")]
    NonContiguous { expected: usize, found: usize },
    #[error("revised trajectory is missing rev_token, teacher_suffix, unsafe_step or backtrack_point")]
    MissingRevisionField,
    #[error("unrevised trajectory carries revision fields")]
    StrayRevisionField,
    #[error("backtrack point {backtrack_point} is not within 1..={unsafe_step}")]
    BacktrackAfterBreach { unsafe_step: usize, backtrack_point: usize },
    #[error("unsafe step {unsafe_step} is not the last of {steps} student steps")]
    BreachNotLast { unsafe_step: usize, steps: usize },
    #[error("breach step {0} is marked safe")]
    BreachMarkedSafe(usize),
    #[error("step {0} is unsafe but precedes the breach")]
    UnsafeBeforeBreach(usize),
    #[error("step {0} is unsafe in an unrevised trajectory")]
    UnsafeWithoutRevision(usize),
    #[error("td_errors has length {found}, expected {expected}")]
    TdLength { expected: usize, found: usize },
    #[error("terminal status {0:?} inconsistent with revised flag")]
    TerminalMismatch(Terminal),
    #[error("{0}")]
    Record(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

/// Every knob of a synthesis run. Flat on purpose: it maps 1:1 onto the
/// key/value config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub gamma0: f64,
    pub alpha: f64,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub stop_sequence: String,
    pub max_step_tokens: usize,
    pub max_trajectory_tokens: usize,
    pub samples_per_question: u64,
    pub entropy_top_k: usize,
    pub concurrency_limit: usize,
    pub seed: u64,
    pub rev_token: String,
    pub answer_markers: Vec<String>,
    pub prompt_prefix: String,
    pub prompt_suffix: String,
    pub skd_beta: f64,
    pub imitkd_mix_p: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma0: 0.3,
            alpha: 1.0,
            student_temperature: 0.6,
            teacher_temperature: 0.6,
            stop_sequence: ".\n\n".into(),
            max_step_tokens: 8192,
            max_trajectory_tokens: 32768,
            samples_per_question: 5,
            entropy_top_k: 20,
            concurrency_limit: 8,
            seed: 0,
            rev_token: "However,".into(),
            answer_markers: vec!["\\boxed{".into()],
            prompt_prefix: String::new(),
            prompt_suffix: "\n".into(),
            skd_beta: 0.8,
            imitkd_mix_p: 0.5,
        }
    }
}

/// Base thresholds swept in the reference experiments.
pub const GAMMA0_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError(m.into()));
        if !(self.gamma0 > 0.0 && self.gamma0 <= 1.0) {
            return err("gamma0 must be in (0, 1]");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return err("alpha must be > 0");
        }
        if !(self.student_temperature >= 0.0 && self.teacher_temperature >= 0.0) {
            return err("temperatures must be >= 0");
        }
        if self.stop_sequence.is_empty() {
            return err("stop_sequence must be non-empty");
        }
        if self.max_step_tokens == 0 || self.max_trajectory_tokens == 0 {
            return err("token caps must be positive");
        }
        if self.max_step_tokens > self.max_trajectory_tokens {
            return err("max_step_tokens must not exceed max_trajectory_tokens");
        }
        if self.samples_per_question == 0 {
            return err("samples_per_question must be positive");
        }
        if self.entropy_top_k < 2 {
            return err("entropy_top_k must be >= 2");
        }
        if self.concurrency_limit == 0 {
            return err("concurrency_limit must be positive");
        }
        if self.rev_token.is_empty() {
            return err("rev_token must be non-empty");
        }
        if !(self.skd_beta > 0.0 && self.skd_beta <= 1.0) {
            return err("skd_beta must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.imitkd_mix_p) {
            return err("imitkd_mix_p must be in [0, 1]");
        }
        Ok(())
    }

    pub fn stitch_spec(&self) -> StitchSpec {
        StitchSpec { rev_token: self.rev_token.clone(), separator: self.stop_sequence.clone() }
    }

    pub fn render_prompt(&self, q: &Question) -> String {
        format!("{}{}{}", self.prompt_prefix, q.text, self.prompt_suffix)
    }

    /// Short stable hash of every setting that can change a record.
    /// Concurrency only affects scheduling and is left out.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(&RunConfig { concurrency_limit: 0, ..self.clone() }).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Assigns one field from its textual form. Keys are the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| ConfigError(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "gamma0" => self.gamma0 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "student_temperature" => self.student_temperature = num(key, value)?,
            "teacher_temperature" => self.teacher_temperature = num(key, value)?,
            "stop_sequence" => self.stop_sequence = unescape(value),
            "max_step_tokens" => self.max_step_tokens = num(key, value)?,
            "max_trajectory_tokens" => self.max_trajectory_tokens = num(key, value)?,
            "samples_per_question" => self.samples_per_question = num(key, value)?,
            "entropy_top_k" => self.entropy_top_k = num(key, value)?,
            "concurrency_limit" => self.concurrency_limit = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "rev_token" => self.rev_token = unescape(value),
            "answer_markers" => {
                self.answer_markers = value
                    .split(',')
                    .map(|m| unescape(m.trim()))
                    .filter(|m| !m.is_empty())
                    .collect()
            }
            "prompt_prefix" => self.prompt_prefix = unescape(value),
            "prompt_suffix" => self.prompt_suffix = unescape(value),
            "skd_beta" => self.skd_beta = num(key, value)?,
            "imitkd_mix_p" => self.imitkd_mix_p = num(key, value)?,
            other => return Err(ConfigError(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

/// Interprets `\n`, `\t`, `\\` and `\"` escapes so multi-line stop
/// sequences fit on one config line.
pub fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some('"') => out.push('"'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}
