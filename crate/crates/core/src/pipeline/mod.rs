//! The synthesis loop for one trajectory, batch orchestration and the
//! piecewise loss evaluator.

pub mod batch;
pub mod loss;

use thiserror::Error;

use crate::backtrack::{self, BacktrackError};
use crate::baselines;
use crate::monitor::{self, MonitorError};
use crate::policy::{self, GenerateRequest, GeneratedStep, PolicyBackend, PolicyError, Role};
use crate::stitch;
use crate::types::{
    CallCounters, Method, Question, RunConfig, StepRecord, StepSource, SynthTrajectory, Terminal,
};

pub use batch::{run_batch, BatchError, BatchOptions, RunSummary};
pub use loss::{evaluate_piecewise_loss, LossReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Backtrack(#[from] BacktrackError),
    #[error("illegal phase transition {from:?} -> {to:?}")]
    Phase { from: Phase, to: Phase },
    #[error("token count {count} exceeds cap {cap}")]
    TokenCap { count: usize, cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Monitoring,
    Breached,
    Correcting,
    Done,
}

/// Mutable state of one synthesis run. Phases only move
/// monitoring -> breached -> correcting -> done, or monitoring -> done.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub question: Question,
    pub prompt: String,
    pub accepted_steps: Vec<StepRecord>,
    pub token_count: usize,
    pub phase: Phase,
    pub counters: CallCounters,
    pub warnings: Vec<String>,
    max_tokens: usize,
}

impl TrajectoryState {
    pub fn new(question: &Question, cfg: &RunConfig) -> Self {
        Self {
            question: question.clone(),
            prompt: cfg.render_prompt(question),
            accepted_steps: Vec::new(),
            token_count: 0,
            phase: Phase::Monitoring,
            counters: CallCounters::default(),
            warnings: Vec::new(),
            max_tokens: cfg.max_trajectory_tokens,
        }
    }

    pub fn transition(&mut self, to: Phase) -> Result<(), PipelineError> {
        use Phase::*;
        let ok = matches!((self.phase, to), (Monitoring, Breached) | (Breached, Correcting) | (Correcting, Done) | (Monitoring, Done));
        if !ok {
            return Err(PipelineError::Phase { from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }

    pub fn remaining_tokens(&self) -> usize {
        self.max_tokens.saturating_sub(self.token_count)
    }

    pub fn add_tokens(&mut self, n: usize) -> Result<(), PipelineError> {
        let count = self.token_count + n;
        if count > self.max_tokens {
            return Err(PipelineError::TokenCap { count, cap: self.max_tokens });
        }
        self.token_count = count;
        Ok(())
    }

    pub fn step_texts(&self) -> Vec<&str> {
        self.accepted_steps.iter().map(|s| s.text.as_str()).collect()
    }

    /// Context before the next step.
    pub fn context(&self, sep: &str) -> String {
        stitch::context_before(&self.prompt, &self.accepted_steps.iter().map(|s| &s.text).collect::<Vec<_>>(), self.accepted_steps.len(), sep)
    }

    fn into_trajectory(self, sample_index: u64, method: Method, sep: &str, terminal: Terminal) -> SynthTrajectory {
        SynthTrajectory {
            question_id: self.question.id,
            sample_index,
            method,
            prompt: self.prompt,
            separator: sep.to_string(),
            student_steps: self.accepted_steps,
            revised: false,
            rev_token: None,
            teacher_suffix: None,
            unsafe_step: None,
            backtrack_point: None,
            td_errors: None,
            terminal,
            counters: self.counters,
            warnings: self.warnings,
            failure: None,
        }
    }
}

/// Whether a generated step ends the trajectory.
pub fn is_terminal_step(step: &GeneratedStep, cfg: &RunConfig) -> bool {
    step.finish == policy::FinishReason::Terminal || cfg.answer_markers.iter().any(|m| step.text.contains(m.as_str()))
}

/// Shared plumbing for every synthesis rule.
pub(crate) struct Run<'a> {
    pub student: &'a dyn PolicyBackend,
    pub teacher: &'a dyn PolicyBackend,
    pub cfg: &'a RunConfig,
    pub sample_index: u64,
    pub state: TrajectoryState,
}

/// How the step loop should proceed after a generated step.
pub(crate) enum Next {
    Continue,
    End(Terminal),
}

impl<'a> Run<'a> {
    pub fn new(
        student: &'a dyn PolicyBackend,
        teacher: &'a dyn PolicyBackend,
        q: &Question,
        sample_index: u64,
        cfg: &'a RunConfig,
    ) -> Self {
        Self { student, teacher, cfg, sample_index, state: TrajectoryState::new(q, cfg) }
    }

    pub fn sep(&self) -> &'a str {
        &self.cfg.stop_sequence
    }

    pub fn seed(&self, role: Role, step: usize) -> u64 {
        policy::derive_seed(self.cfg.seed, role, &self.state.question.id, self.sample_index, step as u64)
    }

    /// Generates the next step with `role`'s policy; `None` when the budget is
    /// spent. Tokens are not charged to the budget until [`Run::commit`].
    pub fn generate(&mut self, role: Role, context: &str) -> Result<Option<GeneratedStep>, PipelineError> {
        let remaining = self.state.remaining_tokens();
        if remaining == 0 {
            return Ok(None);
        }
        let step_no = self.state.accepted_steps.len() + 1;
        let (backend, temperature) = match role {
            Role::Teacher => (self.teacher, self.cfg.teacher_temperature),
            _ => (self.student, self.cfg.student_temperature),
        };
        let req = GenerateRequest {
            context,
            stop: Some(self.sep()),
            max_tokens: self.cfg.max_step_tokens.min(remaining),
            temperature,
            seed: self.seed(role, step_no),
        };
        let g = policy::generate_step(backend, &req)?;
        let c = &mut self.state.counters;
        match role {
            Role::Teacher => {
                c.teacher_gen_calls += 1;
                c.teacher_gen_tokens += g.generated_tokens as u64;
            }
            _ => {
                c.student_gen_calls += 1;
                c.student_gen_tokens += g.generated_tokens as u64;
            }
        }
        Ok(Some(g))
    }

    /// Charges an accepted step to the trajectory budget.
    pub fn commit(&mut self, g: &GeneratedStep) -> Result<(), PipelineError> {
        let n = g.generated_tokens.min(self.state.remaining_tokens());
        self.state.add_tokens(n)
    }

    /// Teacher scores plus boundary for `text` after `context`.
    pub fn judge(&mut self, context: &str, text: &str) -> Result<(Vec<crate::types::TokenScore>, monitor::MonitorVerdict), PipelineError> {
        let scores = policy::score_tokens(self.teacher, context, text)?;
        self.state.counters.teacher_score_calls += 1;
        self.state.counters.teacher_scored_tokens += scores.len() as u64;
        let top = policy::top_k_next(self.teacher, context, self.cfg.entropy_top_k)?;
        self.state.counters.teacher_topk_calls += 1;
        let verdict = monitor::judge_step(&scores, &top, self.cfg)?;
        Ok((scores, verdict))
    }

    /// Classifies an empty generation: ends the trajectory.
    pub fn empty_step_end(&mut self, g: &GeneratedStep) -> Terminal {
        if g.finish == policy::FinishReason::Stop {
            self.state.warnings.push(format!("empty step {} ended at the separator", self.state.accepted_steps.len() + 1));
        }
        if g.finish == policy::FinishReason::Length && self.state.remaining_tokens() == 0 {
            Terminal::TruncatedLength
        } else {
            Terminal::Completed
        }
    }

    /// What to do after accepting `g`.
    pub fn after_accept(&self, g: &GeneratedStep) -> Next {
        if is_terminal_step(g, self.cfg) {
            Next::End(Terminal::Completed)
        } else if self.state.remaining_tokens() == 0 {
            Next::End(Terminal::TruncatedLength)
        } else {
            Next::Continue
        }
    }

    pub fn finish(mut self, method: Method, terminal: Terminal) -> SynthTrajectory {
        if self.state.phase == Phase::Monitoring {
            let _ = self.state.transition(Phase::Done);
        }
        let sep = self.sep();
        self.state.into_trajectory(self.sample_index, method, sep, terminal)
    }

    pub fn fail(self, method: Method, err: &PipelineError) -> SynthTrajectory {
        let mut t = self.finish(method, Terminal::Failed);
        t.failure = Some(err.to_string());
        t
    }
}

/// Runs the monitored loop for one sample of one question. Backend errors do
/// not propagate: they yield `terminal = failed` with the cause recorded.
pub fn synthesize_trajectory(
    student: &dyn PolicyBackend,
    teacher: &dyn PolicyBackend,
    question: &Question,
    sample_index: u64,
    cfg: &RunConfig,
) -> SynthTrajectory {
    let mut run = Run::new(student, teacher, question, sample_index, cfg);
    match motab_loop(&mut run) {
        Ok(Outcome::Plain(terminal)) => run.finish(Method::Motab, terminal),
        Ok(Outcome::Stitched(t)) => *t,
        Err(e) => run.fail(Method::Motab, &e),
    }
}

enum Outcome {
    Plain(Terminal),
    Stitched(Box<SynthTrajectory>),
}

fn motab_loop(run: &mut Run<'_>) -> Result<Outcome, PipelineError> {
    let sep = run.sep();
    loop {
        let ctx = run.state.context(sep);
        let Some(g) = run.generate(Role::Student, &ctx)? else {
            return Ok(Outcome::Plain(Terminal::TruncatedLength));
        };
        run.commit(&g)?;
        if g.text.trim().is_empty() {
            return Ok(Outcome::Plain(run.empty_step_end(&g)));
        }
        let (scores, verdict) = run.judge(&ctx, &g.text)?;
        run.state.accepted_steps.push(StepRecord {
            index: run.state.accepted_steps.len() + 1,
            text: g.text.clone(),
            token_scores: scores,
            value: verdict.value,
            entropy: verdict.entropy,
            threshold: verdict.threshold,
            safe: verdict.safe,
            source: StepSource::Student,
            token_count: g.generated_tokens,
        });
        if !verdict.safe {
            return correct(run).map(|t| Outcome::Stitched(Box::new(t)));
        }
        if let Next::End(t) = run.after_accept(&g) {
            return Ok(Outcome::Plain(t));
        }
    }
}

/// Breach handling: backtrack, teacher correction from the pristine prefix, stitch.
fn correct(run: &mut Run<'_>) -> Result<SynthTrajectory, PipelineError> {
    let sep = run.sep();
    let st = &mut run.state;
    st.transition(Phase::Breached)?;
    let values: Vec<f64> = st.accepted_steps.iter().map(|s| s.value).collect();
    let thresholds: Vec<f64> = st.accepted_steps.iter().map(|s| s.threshold).collect();
    let breach = values.len();
    let bt = backtrack::backtrack(&values, &thresholds, breach)?;
    let texts = st.step_texts();
    let ctx = stitch::correction_context(&st.prompt, &texts, bt.safe_point, sep);
    let kept: usize = st.accepted_steps[..bt.safe_point - 1].iter().map(|s| s.token_count).sum();
    let budget = run.cfg.max_trajectory_tokens.saturating_sub(kept).max(1);
    st.transition(Phase::Correcting)?;

    let req = GenerateRequest {
        context: &ctx,
        stop: None,
        max_tokens: budget,
        temperature: run.cfg.teacher_temperature,
        seed: run.seed(Role::Teacher, breach),
    };
    let g = policy::generate_step(run.teacher, &req)?;
    let st = &mut run.state;
    st.counters.teacher_gen_calls += 1;
    st.counters.teacher_gen_tokens += g.generated_tokens as u64;
    st.transition(Phase::Done)?;

    let steps = std::mem::take(&mut st.accepted_steps);
    let mut t = stitch::stitch_trajectory(
        &st.question.id,
        run.sample_index,
        &st.prompt,
        steps,
        &bt,
        &g.text,
        &run.cfg.stitch_spec(),
    );
    t.counters = st.counters;
    t.warnings.append(&mut st.warnings);
    if t.terminal != Terminal::Failed && g.finish == policy::FinishReason::Length {
        t.terminal = Terminal::TruncatedLength;
        t.warnings.push(format!("teacher correction hit the token cap ({budget})"));
    }
    Ok(t)
}

/// Dispatches to the synthesis rule for `method`.
pub fn synthesize(
    method: Method,
    student: &dyn PolicyBackend,
    teacher: &dyn PolicyBackend,
    question: &Question,
    sample_index: u64,
    cfg: &RunConfig,
) -> SynthTrajectory {
    match method {
        Method::Motab => synthesize_trajectory(student, teacher, question, sample_index, cfg),
        Method::Skd => baselines::synthesize_skd(student, teacher, question, sample_index, cfg),
        Method::Imitkd => baselines::synthesize_imitkd(student, teacher, question, sample_index, cfg),
        Method::Plain => baselines::synthesize_plain(student, teacher, question, sample_index, cfg),
    }
}
