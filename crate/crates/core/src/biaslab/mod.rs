//! Exposure-bias measurements on tabular policies: prefix-distribution
//! divergence, teacher entropy off the data manifold, the mixture trade-off,
//! and the coverage and validity properties of monitored truncation.
//!
//! Every measure here treats one table token as one step and ignores the
//! terminal token's stopping semantics: a prefix of length `L` is just the
//! first `L` tokens of the process.

mod guarantees;
mod probes;
pub mod report;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyError, TabularPolicy, TokenId};

pub use guarantees::{coverage_bound_check, validity_check, CoverageConfig, CoverageReport, ValidityReport};
pub use probes::{
    mixture_tradeoff_scan, ood_entropy_probe, prefix_families, smoothed_point_entropy, smoothed_uniform_entropy,
    MixturePoint, ProbeRow,
};

/// Largest `|V|^L` the exact enumerator accepts.
pub const ENUMERATION_LIMIT: f64 = 1e7;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("state space |V|^L = {vocab}^{length} exceeds {ENUMERATION_LIMIT:e}; use the Monte Carlo estimator")]
    TooLarge { vocab: usize, length: usize },
    #[error("policies disagree on the vocabulary")]
    Vocabulary,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Other(String),
}

pub type PrefixDistribution = BTreeMap<Vec<TokenId>, f64>;

pub fn check_enumerable(vocab: usize, length: usize) -> Result<(), LabError> {
    if (vocab as f64).powi(length as i32) > ENUMERATION_LIMIT {
        return Err(LabError::TooLarge { vocab, length });
    }
    Ok(())
}

pub fn same_vocabulary(a: &TabularPolicy, b: &TabularPolicy) -> Result<(), LabError> {
    if a.spec().vocabulary != b.spec().vocabulary {
        return Err(LabError::Vocabulary);
    }
    Ok(())
}

/// Distribution over the next `length` tokens after `start`; zero-probability
/// branches are pruned.
pub fn continuation_distribution(
    policy: &TabularPolicy,
    start: &[TokenId],
    length: usize,
) -> Result<PrefixDistribution, LabError> {
    check_enumerable(policy.vocab_size(), length)?;
    let mut out = BTreeMap::new();
    let mut ctx = start.to_vec();
    walk(policy, &mut ctx, start.len(), length, 1.0, &mut out);
    Ok(out)
}

fn walk(policy: &TabularPolicy, ctx: &mut Vec<TokenId>, base: usize, left: usize, p: f64, out: &mut PrefixDistribution) {
    if left == 0 {
        *out.entry(ctx[base..].to_vec()).or_default() += p;
        return;
    }
    for (t, q) in policy.next_distribution(ctx).into_iter().enumerate() {
        if q > 0.0 {
            ctx.push(t as TokenId);
            walk(policy, ctx, base, left - 1, p * q, out);
            ctx.pop();
        }
    }
}

pub fn exact_prefix_distribution(policy: &TabularPolicy, length: usize) -> Result<PrefixDistribution, LabError> {
    continuation_distribution(policy, &[], length)
}

pub fn total_variation(p: &PrefixDistribution, q: &PrefixDistribution) -> f64 {
    let mut d: f64 = p.iter().map(|(k, a)| (a - q.get(k).copied().unwrap_or(0.0)).abs()).sum();
    d += q.iter().filter(|(k, _)| !p.contains_key(*k)).map(|(_, b)| b).sum::<f64>();
    (d / 2.0).min(1.0)
}

/// `KL(p || q)`; infinite when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &PrefixDistribution, q: &PrefixDistribution) -> f64 {
    let mut kl = 0.0;
    for (k, &a) in p {
        if a == 0.0 {
            continue;
        }
        match q.get(k) {
            Some(&b) if b > 0.0 => kl += a * (a / b).ln(),
            _ => return f64::INFINITY,
        }
    }
    kl.max(0.0)
}

/// Shannon entropy in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Tv,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    ExactEnumeration,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Exact when every length is enumerable, otherwise Monte Carlo with the default sample count.
    Auto,
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCurve {
    pub lengths: Vec<usize>,
    pub values: Vec<f64>,
    /// Zero for exact points.
    pub std_errors: Vec<f64>,
    pub measure: Measure,
    pub estimator: EstimatorKind,
    pub sample_count: usize,
}

impl DivergenceCurve {
    pub fn to_tsv(&self) -> String {
        let mut o = String::from("length\tvalue\tstd_error\n");
        for ((l, v), se) in self.lengths.iter().zip(&self.values).zip(&self.std_errors) {
            o.push_str(&format!("{l}\t{v:.12e}\t{se:.6e}\n"));
        }
        o
    }
}

/// Monte Carlo TV at length `length`: `E_{s~p_S}[(1 - p_T(s)/p_S(s))+]` with
/// its standard error.
pub fn monte_carlo_tv(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    length: usize,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let s = student.sample_ids(&[], length, &mut rng);
        let ps = student.sequence_prob(&[], &s);
        let pt = teacher.sequence_prob(&[], &s);
        let x = (1.0 - pt / ps).max(0.0);
        sum += x;
        sq += x * x;
    }
    let n = samples.max(1) as f64;
    let mean = sum / n;
    let var = if samples > 1 { (sq / n - mean * mean).max(0.0) * n / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

fn length_seed(seed: u64, length: usize) -> u64 {
    seed ^ (length as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `TV(p_T(s_L), p_S(s_L))` for `L = 1..=max_len`.
pub fn tv_growth_curve(
    teacher: &TabularPolicy,
    student: &TabularPolicy,
    max_len: usize,
    estimator: Estimator,
) -> Result<DivergenceCurve, LabError> {
    same_vocabulary(teacher, student)?;
    let estimator = match estimator {
        Estimator::Auto if check_enumerable(teacher.vocab_size(), max_len).is_ok() => Estimator::Exact,
        Estimator::Auto => Estimator::MonteCarlo { samples: DEFAULT_MC_SAMPLES, seed: 0 },
        e => e,
    };
    let lengths: Vec<usize> = (1..=max_len).collect();
    let points: Result<Vec<(f64, f64)>, LabError> = lengths
        .par_iter()
        .map(|&l| match estimator {
            Estimator::MonteCarlo { samples, seed } => Ok(monte_carlo_tv(teacher, student, l, samples, length_seed(seed, l))),
            _ => {
                let pt = exact_prefix_distribution(teacher, l)?;
                let ps = exact_prefix_distribution(student, l)?;
                Ok((total_variation(&pt, &ps), 0.0))
            }
        })
        .collect();
    let (values, std_errors) = points?.into_iter().unzip();
    let (kind, samples) = match estimator {
        Estimator::MonteCarlo { samples, .. } => (EstimatorKind::MonteCarlo, samples),
        _ => (EstimatorKind::ExactEnumeration, 0),
    };
    Ok(DivergenceCurve { lengths, values, std_errors, measure: Measure::Tv, estimator: kind, sample_count: samples })
}

/// `KL(p_T(s_L) || p_S(s_L))` by exact enumeration.
pub fn kl_growth_curve(teacher: &TabularPolicy, student: &TabularPolicy, max_len: usize) -> Result<DivergenceCurve, LabError> {
    same_vocabulary(teacher, student)?;
    let lengths: Vec<usize> = (1..=max_len).collect();
    let values: Result<Vec<f64>, LabError> = lengths
        .par_iter()
        .map(|&l| Ok(kl_divergence(&exact_prefix_distribution(teacher, l)?, &exact_prefix_distribution(student, l)?)))
        .collect();
    Ok(DivergenceCurve {
        std_errors: vec![0.0; max_len],
        lengths,
        values: values?,
        measure: Measure::Kl,
        estimator: EstimatorKind::ExactEnumeration,
        sample_count: 0,
    })
}

/// TV of the absorbing-error chain at length `l`.
pub fn absorbing_tv(eps: f64, l: usize) -> f64 {
    1.0 - (1.0 - eps).powi(l as i32)
}
