//! Comparison rules driven by the same step loop: step-level SKD, ImitKD
//! source mixing, and plain student rollouts with recorded verdicts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::monitor::{self, MonitorError};
use crate::pipeline::{Next, PipelineError, Run};
use crate::policy::{self, GeneratedStep, PolicyBackend, Role};
use crate::types::{Method, Question, RunConfig, StepRecord, StepSource, SynthTrajectory, TokenScore};

/// Threshold recorded for steps that carry no boundary.
pub const NO_BOUNDARY: f64 = f64::MIN_POSITIVE;

pub const SKD_BETA_SWEEP: [f64; 3] = [0.6, 0.8, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkdConfig {
    pub beta: f64,
}

impl SkdConfig {
    pub fn new(beta: f64) -> Option<Self> {
        (beta > 0.0 && beta <= 1.0).then_some(Self { beta })
    }
}

/// Geometric mean of per-token probabilities. Same computation as the step value.
pub fn geometric_mean_prob(token_scores: &[TokenScore]) -> Result<f64, MonitorError> {
    monitor::step_value(token_scores)
}

pub fn skd_accept(teacher_gm: f64, student_gm: f64, beta: f64) -> bool {
    teacher_gm > beta * student_gm
}

pub fn imitkd_choose(rng_draw: f64, mix_p: f64) -> StepSource {
    if rng_draw >= mix_p {
        StepSource::Student
    } else {
        StepSource::Teacher
    }
}

fn own_value(backend: &dyn PolicyBackend, ctx: &str, g: &GeneratedStep) -> Result<f64, PipelineError> {
    let scores = if g.tokens.is_empty() { policy::score_tokens(backend, ctx, &g.text)? } else { g.tokens.clone() };
    Ok(geometric_mean_prob(&scores)?)
}

fn push_step(run: &mut Run<'_>, g: &GeneratedStep, scores: Vec<TokenScore>, value: f64, threshold: f64, source: StepSource) {
    let steps = &mut run.state.accepted_steps;
    steps.push(StepRecord {
        index: steps.len() + 1,
        text: g.text.clone(),
        token_scores: scores,
        value,
        entropy: 0.0,
        threshold,
        safe: true,
        source,
        token_count: g.generated_tokens,
    });
}

fn finish(run: Run<'_>, method: Method, r: Result<crate::types::Terminal, PipelineError>) -> SynthTrajectory {
    match r {
        Ok(t) => run.finish(method, t),
        Err(e) => run.fail(method, &e),
    }
}

/// SKD at step granularity: keep the student's step when the teacher agrees
/// within margin `beta`, otherwise the teacher regenerates that step alone.
pub fn synthesize_skd(
    student: &dyn PolicyBackend,
    teacher: &dyn PolicyBackend,
    question: &Question,
    sample_index: u64,
    cfg: &RunConfig,
) -> SynthTrajectory {
    let mut run = Run::new(student, teacher, question, sample_index, cfg);
    let r = skd_loop(&mut run);
    finish(run, Method::Skd, r)
}

fn skd_loop(run: &mut Run<'_>) -> Result<crate::types::Terminal, PipelineError> {
    let sep = run.sep();
    loop {
        let ctx = run.state.context(sep);
        let Some(g) = run.generate(Role::Student, &ctx)? else {
            return Ok(crate::types::Terminal::TruncatedLength);
        };
        if g.text.trim().is_empty() {
            run.commit(&g)?;
            return Ok(run.empty_step_end(&g));
        }
        let t_scores = policy::score_tokens(run.teacher, &ctx, &g.text)?;
        run.state.counters.teacher_score_calls += 1;
        run.state.counters.teacher_scored_tokens += t_scores.len() as u64;
        let teacher_gm = geometric_mean_prob(&t_scores)?;
        let student_gm = own_value(run.student, &ctx, &g)?;
        let beta = run.cfg.skd_beta;
        let step = if skd_accept(teacher_gm, student_gm, beta) {
            run.commit(&g)?;
            push_step(run, &g, t_scores, teacher_gm, beta * student_gm, StepSource::Student);
            g
        } else {
            let Some(tg) = run.generate(Role::Teacher, &ctx)? else {
                return Ok(crate::types::Terminal::TruncatedLength);
            };
            run.commit(&tg)?;
            if tg.text.trim().is_empty() {
                return Ok(run.empty_step_end(&tg));
            }
            let v = own_value(run.teacher, &ctx, &tg)?;
            push_step(run, &tg, tg.tokens.clone(), v, NO_BOUNDARY, StepSource::Teacher);
            tg
        };
        if let Next::End(t) = run.after_accept(&step) {
            return Ok(t);
        }
    }
}

/// ImitKD: each step is sourced from the teacher with probability `mix_p`.
pub fn synthesize_imitkd(
    student: &dyn PolicyBackend,
    teacher: &dyn PolicyBackend,
    question: &Question,
    sample_index: u64,
    cfg: &RunConfig,
) -> SynthTrajectory {
    let mut run = Run::new(student, teacher, question, sample_index, cfg);
    let r = imitkd_loop(&mut run);
    finish(run, Method::Imitkd, r)
}

fn imitkd_loop(run: &mut Run<'_>) -> Result<crate::types::Terminal, PipelineError> {
    let sep = run.sep();
    loop {
        let ctx = run.state.context(sep);
        let step_no = run.state.accepted_steps.len() + 1;
        let draw: f64 = ChaCha8Rng::seed_from_u64(run.seed(Role::Rule, step_no)).gen();
        let source = imitkd_choose(draw, run.cfg.imitkd_mix_p);
        let (role, backend) = match source {
            StepSource::Student => (Role::Student, run.student),
            StepSource::Teacher => (Role::Teacher, run.teacher),
        };
        let Some(g) = run.generate(role, &ctx)? else {
            return Ok(crate::types::Terminal::TruncatedLength);
        };
        run.commit(&g)?;
        if g.text.trim().is_empty() {
            return Ok(run.empty_step_end(&g));
        }
        let v = own_value(backend, &ctx, &g)?;
        push_step(run, &g, g.tokens.clone(), v, NO_BOUNDARY, source);
        if let Next::End(t) = run.after_accept(&g) {
            return Ok(t);
        }
    }
}

/// Student rollout with monitor verdicts recorded and no intervention.
pub fn synthesize_plain(
    student: &dyn PolicyBackend,
    teacher: &dyn PolicyBackend,
    question: &Question,
    sample_index: u64,
    cfg: &RunConfig,
) -> SynthTrajectory {
    let mut run = Run::new(student, teacher, question, sample_index, cfg);
    let r = plain_loop(&mut run);
    finish(run, Method::Plain, r)
}

fn plain_loop(run: &mut Run<'_>) -> Result<crate::types::Terminal, PipelineError> {
    let sep = run.sep();
    loop {
        let ctx = run.state.context(sep);
        let Some(g) = run.generate(Role::Student, &ctx)? else {
            return Ok(crate::types::Terminal::TruncatedLength);
        };
        run.commit(&g)?;
        if g.text.trim().is_empty() {
            return Ok(run.empty_step_end(&g));
        }
        let (scores, v) = run.judge(&ctx, &g.text)?;
        let steps = &mut run.state.accepted_steps;
        steps.push(StepRecord {
            index: steps.len() + 1,
            text: g.text.clone(),
            token_scores: scores,
            value: v.value,
            entropy: v.entropy,
            threshold: v.threshold,
            safe: v.safe,
            source: StepSource::Student,
            token_count: g.generated_tokens,
        });
        if let Next::End(t) = run.after_accept(&g) {
            return Ok(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::fixtures;
    use crate::types::Terminal;

    fn ts(lps: &[f64]) -> Vec<TokenScore> {
        lps.iter().map(|&l| TokenScore::new("t", l)).collect()
    }

    #[test]
    fn gm_examples() {
        assert!((geometric_mean_prob(&ts(&[0.25f64.ln()])).unwrap() - 0.25).abs() < 1e-15);
        assert!((geometric_mean_prob(&ts(&[0.9f64.ln(), 0.1f64.ln()])).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(geometric_mean_prob(&ts(&[0.0, 0.0])).unwrap(), 1.0);
        assert!(geometric_mean_prob(&[]).is_err());
    }

    #[test]
    fn accept_rule() {
        assert!(skd_accept(0.5, 0.5, 0.8));
        assert!(!skd_accept(0.5, 0.5, 1.0));
        assert!(skd_accept(0.9, 0.1, 0.6));
        assert!(SkdConfig::new(0.0).is_none());
        assert!(SkdConfig::new(1.0).is_some());
    }

    #[test]
    fn choose_rule() {
        assert_eq!(imitkd_choose(0.0, 0.5), StepSource::Teacher);
        assert_eq!(imitkd_choose(0.99, 0.5), StepSource::Student);
        for d in [0.0, 0.3, 0.999] {
            assert_eq!(imitkd_choose(d, 0.0), StepSource::Student);
        }
    }

    fn cfg() -> RunConfig {
        RunConfig { teacher_temperature: 0.0, student_temperature: 0.0, ..RunConfig::default() }
    }

    #[test]
    fn skd_replaces_rejected_step_without_rev_token() {
        let (s, t) = fixtures::delayed_pair();
        let q = Question::new("q", "Q");
        let tr = synthesize_skd(&s, &t, &q, 0, &cfg());
        assert_eq!(tr.method, Method::Skd);
        assert!(!tr.revised);
        assert!(!tr.text().contains("However,"));
        // b3 has teacher prob ~0.3 < 0.8; the teacher regenerates it as a3.
        assert_eq!(tr.student_steps[2].source, StepSource::Teacher);
        assert_eq!(tr.student_steps[2].text, "a3");
        tr.validate(None, None).unwrap();
    }

    #[test]
    fn imitkd_extremes() {
        let (s, t) = fixtures::delayed_pair();
        let q = Question::new("q", "Q");
        let all_student = synthesize_imitkd(&s, &t, &q, 0, &RunConfig { imitkd_mix_p: 0.0, ..cfg() });
        assert!(all_student.student_steps.iter().all(|x| x.source == StepSource::Student));
        let all_teacher = synthesize_imitkd(&s, &t, &q, 0, &RunConfig { imitkd_mix_p: 1.0, ..cfg() });
        assert!(all_teacher.student_steps.iter().all(|x| x.source == StepSource::Teacher));
        assert_eq!(all_teacher.completion(), "a1.\n\na2.\n\na3.\n\na4.\n\na5");
        assert_eq!(all_teacher.terminal, Terminal::Completed);
    }

    #[test]
    fn plain_records_breach_without_fixing() {
        let (s, t) = fixtures::delayed_pair();
        let tr = synthesize_plain(&s, &t, &Question::new("q", "Q"), 0, &cfg());
        assert!(!tr.revised);
        assert!(!tr.student_steps[4].safe);
        assert_eq!(tr.completion(), "a1.\n\na2.\n\nb3.\n\nb4.\n\nb5");
        tr.validate(Some(0.3), Some(20)).unwrap();
    }
}
