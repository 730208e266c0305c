//! Runs every lab measurement on the bundled fixtures and writes TSV curves
//! plus a JSON summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::*;
use crate::policy::fixtures;
use crate::types::{Question, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabOptions {
    pub max_len: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub coverage_length: usize,
    pub gamma0s: Vec<f64>,
    pub mix_alphas: Vec<f64>,
    pub mixture_length: usize,
}

impl Default for LabOptions {
    fn default() -> Self {
        Self {
            max_len: 12,
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            coverage_length: 6,
            gamma0s: vec![0.1, 0.3, 0.5],
            mix_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            mixture_length: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSummary {
    pub options: LabOptions,
    pub absorbing_tv_exact: DivergenceCurve,
    pub absorbing_tv_mc: DivergenceCurve,
    pub flawed_kl: DivergenceCurve,
    pub ood_probe: Vec<ProbeRow>,
    pub in_distribution_probe: Vec<ProbeRow>,
    pub mixture: Vec<MixturePoint>,
    pub coverage: Vec<CoverageReport>,
    pub validity_delayed: ValidityReport,
    pub validity_regime: ValidityReport,
}

fn probe_tsv(rows: &[ProbeRow]) -> String {
    let mut o = String::from("prefix\tin_support\tentropy\tclosed_form\n");
    for r in rows {
        let cf = r.closed_form.map(|c| format!("{c:.12e}")).unwrap_or_default();
        let _ = writeln!(o, "{}\t{}\t{:.12e}\t{cf}", r.prefix.join(" "), r.in_support, r.entropy);
    }
    o
}

pub fn run_lab(opts: &LabOptions) -> Result<LabSummary, LabError> {
    let (abs_s, abs_t) = fixtures::absorbing_pair(fixtures::ABSORBING_EPS);
    let ood_t = fixtures::ood_teacher(fixtures::OOD_LAMBDA);
    let flawed = fixtures::flawed_student(fixtures::FLAW_EPS);
    let (cov_s, cov_t) = fixtures::coverage_pair();
    let (ood, det) = prefix_families(&ood_t);

    let cfg = RunConfig { samples_per_question: 20, seed: opts.seed, ..RunConfig::default() };
    let questions: Vec<Question> = (0..5).map(|i| Question::new(format!("lab{i}"), "Q")).collect();
    let (ds, dt) = fixtures::delayed_pair();
    let (rs, rt) = fixtures::regime_pair(fixtures::REGIME_BAD_PROB);

    Ok(LabSummary {
        absorbing_tv_exact: tv_growth_curve(&abs_t, &abs_s, opts.max_len, Estimator::Exact)?,
        absorbing_tv_mc: tv_growth_curve(
            &abs_t,
            &abs_s,
            opts.max_len,
            Estimator::MonteCarlo { samples: opts.mc_samples, seed: opts.seed },
        )?,
        flawed_kl: kl_growth_curve(&ood_t, &flawed, opts.max_len.min(6))?,
        ood_probe: ood_entropy_probe(&ood_t, &ood)?,
        in_distribution_probe: ood_entropy_probe(&ood_t, &det)?,
        mixture: mixture_tradeoff_scan(&ood_t, &flawed, &opts.mix_alphas, opts.mixture_length)?,
        coverage: opts
            .gamma0s
            .iter()
            .map(|&g| coverage_bound_check(&cov_s, &cov_t, CoverageConfig { gamma0: g, alpha: 1.0, length: opts.coverage_length }))
            .collect::<Result<_, _>>()?,
        validity_delayed: validity_check(&ds, &dt, &questions[..1], &RunConfig { samples_per_question: 1, ..cfg.clone() })?,
        validity_regime: validity_check(&rs, &rt, &questions, &cfg)?,
        options: opts.clone(),
    })
}

/// Writes `summary.json` and one TSV per measurement into `dir`.
pub fn write_lab(summary: &LabSummary, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("tv_absorbing_exact.tsv"), summary.absorbing_tv_exact.to_tsv())?;
    fs::write(dir.join("tv_absorbing_mc.tsv"), summary.absorbing_tv_mc.to_tsv())?;
    fs::write(dir.join("kl_flawed.tsv"), summary.flawed_kl.to_tsv())?;
    fs::write(dir.join("entropy_ood.tsv"), probe_tsv(&summary.ood_probe))?;
    fs::write(dir.join("entropy_in_distribution.tsv"), probe_tsv(&summary.in_distribution_probe))?;
    let mut m = String::from("mix_alpha\tcorruption\tinference\trisk\n");
    for p in &summary.mixture {
        let _ = writeln!(m, "{}\t{:.12e}\t{:.12e}\t{:.12e}", p.mix_alpha, p.corruption, p.inference, p.risk());
    }
    fs::write(dir.join("mixture.tsv"), m)?;
    let mut c = String::from("gamma0\talpha\tlength\tempirical_tv\tbound\tmarginal_bound\n");
    for r in &summary.coverage {
        let _ = writeln!(
            c,
            "{}\t{}\t{}\t{:.12e}\t{:.12e}\t{:.12e}",
            r.config.gamma0, r.config.alpha, r.config.length, r.empirical_tv, r.bound, r.marginal_bound
        );
    }
    fs::write(dir.join("coverage.tsv"), c)?;
    let mut v = String::from("fixture\tcorrection_entropy\tbreach_entropy\n");
    for (name, r) in [("delayed", &summary.validity_delayed), ("regime", &summary.validity_regime)] {
        for (a, b) in r.correction_entropies.iter().zip(&r.breach_entropies) {
            let _ = writeln!(v, "{name}\t{a:.12e}\t{b:.12e}");
        }
    }
    fs::write(dir.join("validity.tsv"), v)?;
    let json = serde_json::to_string_pretty(summary).map_err(std::io::Error::other)?;
    fs::write(dir.join("summary.json"), json + "\n")
}
