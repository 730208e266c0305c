//! Step value, teacher entropy and the entropy-adaptive safety boundary.

use thiserror::Error;

use crate::types::{RunConfig, TokenScore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error("token score list is empty")]
    EmptyScores,
    #[error("top-k distribution is empty")]
    EmptyDistribution,
    #[error("logprob at position {index} is not finite")]
    NonFinite { index: usize },
    #[error("logprob {value} at position {index} is positive")]
    PositiveLogprob { index: usize, value: f64 },
    #[error("gamma0 {0} outside (0, 1]")]
    Gamma0(f64),
    #[error("alpha {0} must be > 0")]
    Alpha(f64),
    #[error("entropy {0} must be >= 0")]
    Entropy(f64),
}

/// Outcome of judging one step against the boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorVerdict {
    pub value: f64,
    pub entropy: f64,
    pub threshold: f64,
    pub safe: bool,
}

fn check_logprobs(lps: impl Iterator<Item = f64>, allow_positive: bool) -> Result<(), MonitorError> {
    for (index, value) in lps.enumerate() {
        if !value.is_finite() {
            return Err(MonitorError::NonFinite { index });
        }
        if !allow_positive && value > 0.0 {
            return Err(MonitorError::PositiveLogprob { index, value });
        }
    }
    Ok(())
}

/// Length-normalized likelihood: `exp(mean(logprob))`, i.e. the geometric
/// mean of the per-token probabilities.
pub fn step_value(token_scores: &[TokenScore]) -> Result<f64, MonitorError> {
    if token_scores.is_empty() {
        return Err(MonitorError::EmptyScores);
    }
    check_logprobs(token_scores.iter().map(|t| t.logprob), false)?;
    let mean = token_scores.iter().map(|t| t.logprob).sum::<f64>() / token_scores.len() as f64;
    Ok(mean.exp())
}

/// Shannon entropy (nats) of the top-k candidates after renormalizing
/// their probabilities to sum to one.
pub fn renormalized_entropy(top_k: &[(String, f64)]) -> Result<f64, MonitorError> {
    if top_k.is_empty() {
        return Err(MonitorError::EmptyDistribution);
    }
    check_logprobs(top_k.iter().map(|(_, l)| *l), true)?;
    if top_k.len() == 1 {
        return Ok(0.0);
    }
    // Renormalization absorbs any constant shift; subtracting the max keeps
    // exp() in range.
    let max = top_k.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut weighted = 0.0;
    for (_, lp) in top_k {
        let a = lp - max;
        let w = a.exp();
        z += w;
        weighted += w * a;
    }
    let h = z.ln() - weighted / z;
    Ok(h.clamp(0.0, (top_k.len() as f64).ln()))
}

/// `gamma0 * exp(-alpha * entropy)`.
pub fn adaptive_threshold(gamma0: f64, alpha: f64, entropy: f64) -> Result<f64, MonitorError> {
    if !(gamma0 > 0.0 && gamma0 <= 1.0) {
        return Err(MonitorError::Gamma0(gamma0));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(MonitorError::Alpha(alpha));
    }
    if !(entropy >= 0.0 && entropy.is_finite()) {
        return Err(MonitorError::Entropy(entropy));
    }
    Ok(gamma0 * (-alpha * entropy).exp())
}

/// Scores a step: value from the teacher's token logprobs, boundary from the
/// teacher's top-k next-token distribution at the step's start. Ties count
/// as safe.
pub fn judge_step(
    token_scores: &[TokenScore],
    top_k: &[(String, f64)],
    cfg: &RunConfig,
) -> Result<MonitorVerdict, MonitorError> {
    judge_with(token_scores, top_k, cfg.gamma0, cfg.alpha)
}

pub fn judge_with(
    token_scores: &[TokenScore],
    top_k: &[(String, f64)],
    gamma0: f64,
    alpha: f64,
) -> Result<MonitorVerdict, MonitorError> {
    let value = step_value(token_scores)?;
    let entropy = renormalized_entropy(top_k)?;
    let threshold = adaptive_threshold(gamma0, alpha, entropy)?;
    Ok(MonitorVerdict { value, entropy, threshold, safe: value >= threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(lps: &[f64]) -> Vec<TokenScore> {
        lps.iter().enumerate().map(|(i, &l)| TokenScore::new(format!("t{i}"), l)).collect()
    }

    fn dist(lps: &[f64]) -> Vec<(String, f64)> {
        lps.iter().enumerate().map(|(i, &l)| (format!("t{i}"), l)).collect()
    }

    #[test]
    fn certain_token_has_value_one() {
        assert_eq!(step_value(&ts(&[0.0])).unwrap(), 1.0);
    }

    #[test]
    fn equal_halves_give_half() {
        let h = 0.5f64.ln();
        assert!((step_value(&ts(&[h, h])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn step_value_errors() {
        assert_eq!(step_value(&[]), Err(MonitorError::EmptyScores));
        assert!(matches!(step_value(&ts(&[0.1])), Err(MonitorError::PositiveLogprob { .. })));
        assert!(matches!(step_value(&ts(&[f64::NAN])), Err(MonitorError::NonFinite { .. })));
        assert!(matches!(step_value(&ts(&[f64::NEG_INFINITY])), Err(MonitorError::NonFinite { .. })));
    }

    #[test]
    fn uniform_four_entropy_is_ln4() {
        let q = 0.25f64.ln();
        let h = renormalized_entropy(&dist(&[q, q, q, q])).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-15);
        assert!((h - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn single_entry_entropy_is_zero() {
        assert_eq!(renormalized_entropy(&dist(&[-3.7])).unwrap(), 0.0);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(adaptive_threshold(0.3, 1.0, 0.0).unwrap(), 0.3);
        assert!((adaptive_threshold(0.3, 1.0, 2f64.ln()).unwrap() - 0.15).abs() < 1e-15);
        assert!(adaptive_threshold(0.0, 1.0, 0.0).is_err());
        assert!(adaptive_threshold(0.3, 0.0, 0.0).is_err());
        assert!(adaptive_threshold(0.3, 1.0, -0.1).is_err());
    }

    #[test]
    fn verdicts_from_case_studies() {
        // value 0.42 vs boundary 0.49, and 0.41 vs 0.48: both unsafe.
        for (v, g) in [(0.42f64, 0.49f64), (0.41, 0.48)] {
            let verdict = judge_with(&ts(&[v.ln()]), &dist(&[0.0]), g, 1.0).unwrap();
            assert!((verdict.threshold - g).abs() < 1e-15);
            assert!(!verdict.safe);
        }
    }

    #[test]
    fn tie_is_safe() {
        let v = judge_with(&ts(&[0.5f64.ln()]), &dist(&[0.0]), 0.5, 1.0).unwrap();
        assert_eq!(v.value, 0.5);
        assert!(v.safe);
    }

    proptest! {
        #[test]
        fn value_depends_only_on_multiset(mut lps in prop::collection::vec(-20.0f64..0.0, 1..12)) {
            let a = step_value(&ts(&lps)).unwrap();
            lps.reverse();
            let b = step_value(&ts(&lps)).unwrap();
            prop_assert!((a - b).abs() <= 1e-14);
            prop_assert!(a > 0.0 && a <= 1.0);
        }

        #[test]
        fn threshold_bounded_by_gamma0(g in 0.01f64..=1.0, a in 0.01f64..5.0, h in 0.0f64..10.0) {
            let t = adaptive_threshold(g, a, h).unwrap();
            prop_assert!(t > 0.0 && t <= g);
            if h > 1e-9 { prop_assert!(t < g); }
            let t2 = adaptive_threshold(g, a, h + 0.1).unwrap();
            prop_assert!(t2 < t);
        }

        #[test]
        fn entropy_shift_invariant(lps in prop::collection::vec(-15.0f64..0.0, 1..20), c in -5.0f64..5.0) {
            let h1 = renormalized_entropy(&dist(&lps)).unwrap();
            let shifted: Vec<f64> = lps.iter().map(|l| l + c).collect();
            let h2 = renormalized_entropy(&dist(&shifted)).unwrap();
            prop_assert!((h1 - h2).abs() < 1e-12);
            prop_assert!(h1 >= 0.0 && h1 <= (lps.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn raising_a_logprob_never_unsafes(
            lps in prop::collection::vec(-10.0f64..-0.01, 1..10),
            idx in 0usize..10,
            bump in 0.0f64..1.0,
            thr in 0.001f64..1.0,
        ) {
            let before = judge_with(&ts(&lps), &dist(&[0.0]), thr, 1.0).unwrap();
            let mut raised = lps.clone();
            let i = idx % raised.len();
            raised[i] = (raised[i] + bump).min(0.0);
            let after = judge_with(&ts(&raised), &dist(&[0.0]), thr, 1.0).unwrap();
            prop_assert!(after.value >= before.value);
            prop_assert!(!(before.safe && !after.safe));
        }
    }
}
