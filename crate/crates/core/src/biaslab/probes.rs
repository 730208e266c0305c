//! Teacher entropy on and off its data manifold, and the mixture scan.

use serde::{Deserialize, Serialize};

use super::{entropy, exact_prefix_distribution, same_vocabulary, total_variation, LabError};
use crate::policy::{TabularPolicy, TokenId};

/// Entropy of a teacher that has collapsed to its smoothing prior.
pub fn smoothed_uniform_entropy(vocab: usize) -> f64 {
    (vocab as f64).ln()
}

/// Entropy of `(1 - λ) δ + λ U` over `vocab` tokens.
pub fn smoothed_point_entropy(lambda: f64, vocab: usize) -> f64 {
    let v = vocab as f64;
    let top = 1.0 - lambda + lambda / v;
    let rest = lambda / v;
    let mut h = -top * top.ln();
    if rest > 0.0 {
        h -= (v - 1.0) * rest * rest.ln();
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub prefix: Vec<String>,
    pub in_support: bool,
    pub entropy: f64,
    /// Closed form when the prefix is off-support or has a deterministic row.
    pub closed_form: Option<f64>,
}

/// Full-width contexts split into `(off_support, deterministic)`.
pub fn prefix_families(teacher: &TabularPolicy) -> (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
    let v = teacher.vocab_size() as TokenId;
    let mut all: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..teacher.order() {
        all = all.into_iter().flat_map(|p| (0..v).map(move |t| [p.clone(), vec![t]].concat())).collect();
    }
    let (mut ood, mut det) = (Vec::new(), Vec::new());
    for p in all {
        match teacher.raw_row(&p) {
            None => ood.push(p),
            Some(row) if row.iter().any(|&x| x >= 1.0 - 1e-12) => det.push(p),
            Some(_) => {}
        }
    }
    (ood, det)
}

pub fn ood_entropy_probe(teacher: &TabularPolicy, prefixes: &[Vec<TokenId>]) -> Result<Vec<ProbeRow>, LabError> {
    let lambda = teacher.lambda();
    if lambda <= 0.0 {
        return Err(LabError::Other("entropy probe needs a smoothed teacher (lambda > 0)".into()));
    }
    let v = teacher.vocab_size();
    Ok(prefixes
        .iter()
        .map(|p| {
            let row = teacher.raw_row(p);
            let closed_form = match row {
                None => Some(smoothed_uniform_entropy(v)),
                Some(r) if r.iter().any(|&x| x >= 1.0 - 1e-12) => Some(smoothed_point_entropy(lambda, v)),
                Some(_) => None,
            };
            ProbeRow {
                prefix: p.iter().map(|&t| teacher.token_name(t).to_string()).collect(),
                in_support: row.is_some(),
                entropy: entropy(&teacher.next_distribution(p)),
                closed_form,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePoint {
    pub mix_alpha: f64,
    /// `mix_alpha * E_{s~p_S}[H(pi_T | s)]`, averaged over positions `0..L`.
    pub corruption: f64,
    /// `(1 - mix_alpha) * TV(p_T(s_L), p_S(s_L))`.
    pub inference: f64,
}

impl MixturePoint {
    pub fn risk(&self) -> f64 {
        self.corruption + self.inference
    }
}

/// Evaluates both risk terms for each mixture weight at prefix length `length`.
pub fn mixture_tradeoff_scan(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    mix_alphas: &[f64],
    length: usize,
) -> Result<Vec<MixturePoint>, LabError> {
    same_vocabulary(teacher, student)?;
    let mut h_sum = 0.0;
    for l in 0..length {
        let ps = exact_prefix_distribution(student, l)?;
        h_sum += ps.iter().map(|(s, p)| p * entropy(&teacher.next_distribution(s))).sum::<f64>();
    }
    let corruption = h_sum / length.max(1) as f64;
    let tv = total_variation(&exact_prefix_distribution(teacher, length)?, &exact_prefix_distribution(student, length)?);
    Ok(mix_alphas
        .iter()
        .map(|&a| MixturePoint { mix_alpha: a, corruption: a * corruption, inference: (1.0 - a) * tv })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::fixtures;

    #[test]
    fn closed_forms() {
        assert!((smoothed_uniform_entropy(8) - 8f64.ln()).abs() < 1e-15);
        assert_eq!(smoothed_point_entropy(0.0, 8), 0.0);
        let lam = 0.01;
        let p: Vec<f64> = (0..8).map(|i| if i == 0 { 1.0 - lam + lam / 8.0 } else { lam / 8.0 }).collect();
        assert!((smoothed_point_entropy(lam, 8) - super::super::entropy(&p)).abs() < 1e-15);
    }

    #[test]
    fn probe_families() {
        let t = fixtures::ood_teacher(fixtures::OOD_LAMBDA);
        let (ood, det) = prefix_families(&t);
        assert!(!ood.is_empty() && !det.is_empty());
        for r in ood_entropy_probe(&t, &ood).unwrap() {
            assert!(!r.in_support);
            assert!((r.entropy - 8f64.ln()).abs() < 1e-12);
        }
        for r in ood_entropy_probe(&t, &det).unwrap() {
            assert!((r.entropy - r.closed_form.unwrap()).abs() < 1e-12);
            assert!(r.entropy < 0.5 * 8f64.ln());
        }
        assert!(ood_entropy_probe(&fixtures::absorbing_pair(0.05).1, &[vec![]]).is_err());
    }

    #[test]
    fn lambda_to_zero_collapses_in_distribution_entropy() {
        let t = fixtures::ood_teacher(1e-9);
        let (_, det) = prefix_families(&t);
        let rows = ood_entropy_probe(&t, &det).unwrap();
        assert!(rows.iter().all(|r| r.entropy < 1e-6));
    }

    #[test]
    fn scan_boundaries() {
        let t = fixtures::ood_teacher(fixtures::OOD_LAMBDA);
        let s = fixtures::flawed_student(fixtures::FLAW_EPS);
        let pts = mixture_tradeoff_scan(&t, &s, &[0.0, 1.0], 4).unwrap();
        assert_eq!(pts[0].corruption, 0.0);
        let tv = super::super::tv_growth_curve(&t, &s, 4, super::super::Estimator::Exact).unwrap().values[3];
        assert!((pts[0].inference - tv).abs() < 1e-15);
        assert_eq!(pts[1].inference, 0.0);
    }
}
