//! Piecewise distillation objective over a synthesized dataset, evaluated
//! under the student policy.
//!
//! Each judged step is one instance. A safe step contributes
//! `-log p_S(step | context before it)`; the breach step of a revised record
//! contributes `-log p_S(" " + rev + " " + suffix | prompt + steps 1..=l)`.
//! Both sums are divided by the instance count. Unsafe steps without a
//! revision (plain rollouts) have no target and are only counted.

use serde::{Deserialize, Serialize};

use crate::dataio::SftRecord;
use crate::policy::{self, PolicyBackend, PolicyError};
use crate::stitch;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub on_policy_term: f64,
    pub correction_term: f64,
    pub on_policy_count: usize,
    pub correction_count: usize,
    pub instances: usize,
    pub skipped_unsafe: usize,
    pub empty: bool,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.on_policy_term + self.correction_term
    }
}

fn nll(student: &dyn PolicyBackend, ctx: &str, text: &str) -> Result<f64, PolicyError> {
    Ok(-policy::score_tokens(student, ctx, text)?.iter().map(|t| t.logprob).sum::<f64>())
}

pub fn evaluate_piecewise_loss(student: &dyn PolicyBackend, records: &[SftRecord]) -> Result<LossReport, PolicyError> {
    let mut r = LossReport { empty: records.is_empty(), ..Default::default() };
    let (mut on, mut corr) = (0.0, 0.0);
    for rec in records {
        let sep = &rec.separator;
        let steps = &rec.student_steps;
        for (i, text) in steps.iter().enumerate() {
            let l = i + 1;
            if rec.revised && rec.unsafe_step == Some(l) {
                let ctx = format!("{}{}", rec.prompt, stitch::join_steps(&steps[..l], sep));
                let spec = stitch::StitchSpec { rev_token: rec.rev_token.clone().unwrap_or_default(), separator: sep.clone() };
                let target = &rec.completion[stitch::rev_offset(&steps[..l], &spec)..];
                corr += nll(student, &ctx, target)?;
                r.correction_count += 1;
                continue;
            }
            let safe = match (rec.step_values.get(i), rec.step_thresholds.get(i)) {
                (Some(v), Some(g)) => v >= g,
                _ => true,
            };
            if !safe {
                r.skipped_unsafe += 1;
                continue;
            }
            if text.is_empty() {
                continue;
            }
            on += nll(student, &stitch::context_before(&rec.prompt, steps, i, sep), text)?;
            r.on_policy_count += 1;
        }
    }
    r.instances = r.on_policy_count + r.correction_count;
    if r.instances > 0 {
        r.on_policy_term = on / r.instances as f64;
        r.correction_term = corr / r.instances as f64;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::fixtures;
    use crate::policy::tabular::TabularBuilder;
    use crate::types::{Question, RunConfig};

    #[test]
    fn single_unrevised_step() {
        let s = TabularBuilder::new("s", &["Q", "a", "b", "<eos>"], 1, "<eos>")
            .row(&["Q"], &[("a", 0.5), ("b", 0.5)])
            .build()
            .unwrap();
        let t = crate::pipeline::synthesize_trajectory(&s, &s, &Question::new("q", "Q"), 0, &RunConfig { gamma0: 0.01, ..Default::default() });
        let mut rec = SftRecord::from_trajectory(&t, "");
        rec.student_steps = vec!["a".into()];
        rec.completion = "a".into();
        rec.step_values = vec![0.5];
        rec.step_thresholds = vec![0.01];
        let r = evaluate_piecewise_loss(&s, &[rec]).unwrap();
        assert!((r.on_policy_term - 2f64.ln()).abs() < 1e-15);
        assert_eq!(r.correction_term, 0.0);
        assert_eq!(r.instances, 1);
    }

    #[test]
    fn empty_dataset() {
        let (s, _) = fixtures::delayed_pair();
        let r = evaluate_piecewise_loss(&s, &[]).unwrap();
        assert!(r.empty);
        assert_eq!((r.on_policy_term, r.correction_term), (0.0, 0.0));
    }

    #[test]
    fn revised_record_splits_terms() {
        let (s, t) = fixtures::delayed_pair();
        let cfg = RunConfig { teacher_temperature: 0.0, ..Default::default() };
        let tr = crate::pipeline::synthesize_trajectory(&s, &t, &Question::new("q", "Q"), 0, &cfg);
        let rec = SftRecord::from_trajectory(&tr, "");
        // The unsmoothed student cannot score the out-of-vocabulary revision token.
        assert!(evaluate_piecewise_loss(&s, std::slice::from_ref(&rec)).is_err());
        let r = evaluate_piecewise_loss(&t, &[rec]).unwrap();
        assert_eq!(r.on_policy_count, 4);
        assert_eq!(r.correction_count, 1);
        assert!(r.on_policy_term > 0.0 && r.correction_term > 0.0);
    }
}
