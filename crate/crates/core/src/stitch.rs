//! Trajectory stitching: flawed student prefix, revision token, teacher
//! correction.
//!
//! Text layout is fixed so every consumer (pipeline, evaluator, validator)
//! reconstructs the same bytes:
//!
//! * context before step `k`: `prompt + step_1 + sep + ... + step_{k-1} + sep`
//! * unrevised completion: steps joined by `sep`
//! * revised completion: `join(steps_1..=l, sep) + " " + rev_token + " " + suffix`
//!   where leading whitespace of the teacher suffix is dropped.

use serde::{Deserialize, Serialize};

use crate::backtrack::BacktrackResult;
use crate::types::{CallCounters, Method, StepRecord, SynthTrajectory, Terminal};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchSpec {
    pub rev_token: String,
    pub separator: String,
}

impl Default for StitchSpec {
    fn default() -> Self {
        Self { rev_token: "However,".into(), separator: ".\n\n".into() }
    }
}

pub fn join_steps<S: AsRef<str>>(steps: &[S], sep: &str) -> String {
    let mut out = String::new();
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            out.push_str(sep);
        }
        out.push_str(s.as_ref());
    }
    out
}

/// Context the policies see before generating step `n_done + 1`.
pub fn context_before<S: AsRef<str>>(prompt: &str, steps: &[S], n_done: usize, sep: &str) -> String {
    let mut out = String::from(prompt);
    for s in &steps[..n_done] {
        out.push_str(s.as_ref());
        out.push_str(sep);
    }
    out
}

/// The pristine prefix `s_{l*-1}`: question plus steps `1..l*-1`.
///
/// # Panics
/// If `l_star` is 0 or exceeds `steps.len() + 1`.
pub fn correction_context<S: AsRef<str>>(prompt: &str, steps: &[S], l_star: usize, sep: &str) -> String {
    assert!(l_star >= 1 && l_star <= steps.len() + 1, "l* = {l_star} out of range");
    context_before(prompt, steps, l_star - 1, sep)
}

pub fn stitched_completion<S: AsRef<str>>(steps: &[S], teacher_suffix: &str, spec: &StitchSpec) -> String {
    let mut out = join_steps(steps, &spec.separator);
    out.push(' ');
    out.push_str(&spec.rev_token);
    out.push(' ');
    out.push_str(teacher_suffix.trim_start());
    out
}

/// Byte offset in the completion where the revision token (with its leading
/// space) begins.
pub fn rev_offset<S: AsRef<str>>(steps: &[S], spec: &StitchSpec) -> usize {
    join_steps(steps, &spec.separator).len()
}

/// Builds the revised trajectory. `student_steps` must run through the unsafe
/// step, which is retained. An empty teacher suffix yields a failed record.
#[allow(clippy::too_many_arguments)]
pub fn stitch_trajectory(
    question_id: &str,
    sample_index: u64,
    prompt: &str,
    student_steps: Vec<StepRecord>,
    backtrack: &BacktrackResult,
    teacher_suffix: &str,
    spec: &StitchSpec,
) -> SynthTrajectory {
    let unsafe_step = student_steps.len();
    let mut traj = SynthTrajectory {
        question_id: question_id.to_string(),
        sample_index,
        method: Method::Motab,
        prompt: prompt.to_string(),
        separator: spec.separator.clone(),
        student_steps,
        revised: true,
        rev_token: Some(spec.rev_token.clone()),
        teacher_suffix: Some(teacher_suffix.trim_start().to_string()),
        unsafe_step: Some(unsafe_step),
        backtrack_point: Some(backtrack.safe_point),
        td_errors: Some(backtrack.td_errors.clone()),
        terminal: Terminal::Revised,
        counters: CallCounters::default(),
        warnings: Vec::new(),
        failure: None,
    };
    if teacher_suffix.trim().is_empty() {
        traj.terminal = Terminal::Failed;
        traj.failure = Some("teacher correction was empty".into());
    }
    traj
}
