//! Coverage and validity of monitored truncation on tabular chains.

use serde::{Deserialize, Serialize};

use super::{continuation_distribution, entropy, exact_prefix_distribution, same_vocabulary, total_variation, LabError, PrefixDistribution};
use crate::backtrack;
use crate::dataio::stats::median_sorted;
use crate::monitor;
use crate::pipeline::synthesize_trajectory;
use crate::policy::{self, PolicyBackend, TabularPolicy, TokenId};
use crate::stitch;
use crate::types::{Question, RunConfig, Terminal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub gamma0: f64,
    pub alpha: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: CoverageConfig,
    /// `TV(p_S, p_truncated)` at the configured length.
    pub empirical_tv: f64,
    /// Sum over steps of the probability that the first truncation lands there.
    pub bound: f64,
    pub truncation_by_step: Vec<f64>,
    /// Sum over steps of `P_{s~p_S, y~pi_S}(V_T < gamma)`, without stopping at
    /// the first truncation. Never smaller than `bound`.
    pub marginal_bound: f64,
}

impl CoverageReport {
    pub fn slack(&self) -> f64 {
        self.bound - self.empirical_tv
    }
}

struct Truncation<'a> {
    student: &'a TabularPolicy,
    teacher: &'a TabularPolicy,
    cfg: CoverageConfig,
    out: PrefixDistribution,
    first: Vec<f64>,
}

impl Truncation<'_> {
    fn threshold(&self, ctx: &[TokenId]) -> Result<f64, LabError> {
        let h = entropy(&self.teacher.next_distribution(ctx));
        monitor::adaptive_threshold(self.cfg.gamma0, self.cfg.alpha, h).map_err(|e| LabError::Other(e.to_string()))
    }

    fn walk(&mut self, path: &mut Vec<TokenId>, values: &mut Vec<f64>, gammas: &mut Vec<f64>, p: f64) -> Result<(), LabError> {
        let depth = path.len();
        if depth == self.cfg.length {
            *self.out.entry(path.clone()).or_default() += p;
            return Ok(());
        }
        let gamma = self.threshold(path)?;
        for (y, q) in self.student.next_distribution(path).into_iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            let y = y as TokenId;
            let v = self.teacher.prob(path, y);
            path.push(y);
            values.push(v);
            gammas.push(gamma);
            if v < gamma {
                let l = depth + 1;
                self.first[depth] += p * q;
                let bt = backtrack::backtrack(values, gammas, l).map_err(|e| LabError::Other(e.to_string()))?;
                let root = &path[..bt.safe_point - 1];
                for (cont, r) in continuation_distribution(self.teacher, root, self.cfg.length - l)? {
                    let key = [path.as_slice(), &cont].concat();
                    *self.out.entry(key).or_default() += p * q * r;
                }
            } else {
                self.walk(path, values, gammas, p * q)?;
            }
            path.pop();
            values.pop();
            gammas.pop();
        }
        Ok(())
    }
}

/// Exact comparison of the student's prefix distribution with the
/// distribution after monitored truncation. One table token is one step; a
/// breach at `l` keeps the student's first `l` tokens and fills the rest with
/// a teacher rollout from the rewind point.
pub fn coverage_bound_check(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    cfg: CoverageConfig,
) -> Result<CoverageReport, LabError> {
    same_vocabulary(student, teacher)?;
    super::check_enumerable(student.vocab_size(), cfg.length)?;
    let mut t = Truncation { student, teacher, cfg, out: PrefixDistribution::new(), first: vec![0.0; cfg.length] };
    t.walk(&mut Vec::new(), &mut Vec::new(), &mut Vec::new(), 1.0)?;
    let ps = exact_prefix_distribution(student, cfg.length)?;
    let empirical_tv = total_variation(&ps, &t.out);

    let mut marginal_bound = 0.0;
    for l in 0..cfg.length {
        for (s, p) in exact_prefix_distribution(student, l)? {
            let gamma = t.threshold(&s)?;
            let pi_s = student.next_distribution(&s);
            let pi_t = teacher.next_distribution(&s);
            marginal_bound += p * pi_s.iter().zip(&pi_t).filter(|(_, &v)| v < gamma).map(|(q, _)| q).sum::<f64>();
        }
    }
    Ok(CoverageReport { config: cfg, empirical_tv, bound: t.first.iter().sum(), truncation_by_step: t.first, marginal_bound })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub trajectories: usize,
    pub breaches: usize,
    /// Teacher top-k entropy at the rewind context `s_{l*-1}`.
    pub correction_entropies: Vec<f64>,
    /// Teacher top-k entropy at the breached context `s_l`.
    pub breach_entropies: Vec<f64>,
    pub median_correction: Option<f64>,
    pub median_breach: Option<f64>,
    pub empty: bool,
}

impl ValidityReport {
    /// Median entropy at rewind contexts strictly below the breach contexts.
    pub fn holds(&self) -> bool {
        matches!((self.median_correction, self.median_breach), (Some(c), Some(b)) if c < b)
    }
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Some(median_sorted(&s))
}

/// Synthesizes `samples_per_question` trajectories per question and compares
/// teacher entropy where the correction is generated with entropy where the
/// student broke down.
pub fn validity_check(
    student: &dyn PolicyBackend,
    teacher: &dyn PolicyBackend,
    questions: &[Question],
    cfg: &RunConfig,
) -> Result<ValidityReport, LabError> {
    let mut rep = ValidityReport {
        trajectories: 0,
        breaches: 0,
        correction_entropies: Vec::new(),
        breach_entropies: Vec::new(),
        median_correction: None,
        median_breach: None,
        empty: true,
    };
    let ent = |ctx: &str| -> Result<f64, LabError> {
        let top = policy::top_k_next(teacher, ctx, cfg.entropy_top_k)?;
        monitor::renormalized_entropy(&top).map_err(|e| LabError::Other(e.to_string()))
    };
    for q in questions {
        for i in 0..cfg.samples_per_question {
            let t = synthesize_trajectory(student, teacher, q, i, cfg);
            rep.trajectories += 1;
            if t.terminal == Terminal::Failed {
                return Err(LabError::Other(t.failure.unwrap_or_default()));
            }
            let (Some(l), Some(l_star)) = (t.unsafe_step, t.backtrack_point) else { continue };
            let steps = t.step_texts();
            rep.breaches += 1;
            rep.correction_entropies.push(ent(&stitch::correction_context(&t.prompt, &steps, l_star, &t.separator))?);
            rep.breach_entropies.push(ent(&stitch::context_before(&t.prompt, &steps, l, &t.separator))?);
        }
    }
    rep.empty = rep.breaches == 0;
    rep.median_correction = median(&rep.correction_entropies);
    rep.median_breach = median(&rep.breach_entropies);
    Ok(rep)
}
