//! Run statistics over a synthesized dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::records::SftRecord;
use crate::types::CallCounters;

pub const RELATIVE_BINS: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl MarginSummary {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: median_sorted(&v),
            min: v[0],
            max: v[v.len() - 1],
        }
    }
}

pub fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMean {
    pub index: usize,
    pub mean_value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub total: usize,
    pub empty: bool,
    pub revised: usize,
    pub backtrack_rate: f64,
    pub terminal_counts: BTreeMap<String, usize>,
    pub depth_histogram: BTreeMap<usize, usize>,
    pub unsafe_step_histogram: BTreeMap<usize, usize>,
    /// Bin `i` counts `unsafe_step / step_count` in `[i/10, (i+1)/10)`; 1.0 lands in the last bin.
    pub relative_unsafe_histogram: Vec<usize>,
    pub mean_value_by_step: Vec<StepMean>,
    pub margins_revised: MarginSummary,
    pub margins_unrevised: MarginSummary,
    pub counters: CallCounters,
}

/// Relative-position bin for a breach at `unsafe_step` of `step_count` steps.
pub fn relative_bin(unsafe_step: usize, step_count: usize) -> usize {
    let r = unsafe_step as f64 / step_count.max(1) as f64;
    ((r * RELATIVE_BINS as f64).floor() as usize).min(RELATIVE_BINS - 1)
}

/// Per-step safety margins `V - gamma`, split into (revised, unrevised) records.
pub fn margins(records: &[SftRecord]) -> (Vec<f64>, Vec<f64>) {
    let mut rev = Vec::new();
    let mut unrev = Vec::new();
    for r in records {
        let dst = if r.revised { &mut rev } else { &mut unrev };
        dst.extend(r.step_values.iter().zip(&r.step_thresholds).map(|(v, g)| v - g));
    }
    (rev, unrev)
}

pub fn trajectory_stats(records: &[SftRecord]) -> StatsSummary {
    let mut s = StatsSummary {
        total: records.len(),
        empty: records.is_empty(),
        relative_unsafe_histogram: vec![0; RELATIVE_BINS],
        ..Default::default()
    };
    if records.is_empty() {
        return s;
    }
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in records {
        *s.terminal_counts.entry(r.terminal.as_str().to_string()).or_default() += 1;
        s.counters.add(&r.counters);
        for (i, v) in r.step_values.iter().enumerate() {
            if sums.len() <= i {
                sums.push((0.0, 0));
            }
            sums[i].0 += v;
            sums[i].1 += 1;
        }
        if !r.revised {
            continue;
        }
        s.revised += 1;
        if let Some(d) = r.depth {
            *s.depth_histogram.entry(d).or_default() += 1;
        }
        if let Some(l) = r.unsafe_step {
            *s.unsafe_step_histogram.entry(l).or_default() += 1;
            s.relative_unsafe_histogram[relative_bin(l, r.step_count)] += 1;
        }
    }
    s.backtrack_rate = s.revised as f64 / s.total as f64;
    s.mean_value_by_step = sums
        .into_iter()
        .enumerate()
        .map(|(i, (sum, n))| StepMean { index: i + 1, mean_value: sum / n as f64, count: n })
        .collect();
    let (rev, unrev) = margins(records);
    s.margins_revised = MarginSummary::from_values(&rev);
    s.margins_unrevised = MarginSummary::from_values(&unrev);
    s
}

fn bar(n: usize, max: usize) -> String {
    let width = if max == 0 { 0 } else { (n * 40).div_ceil(max) };
    "#".repeat(width)
}

impl StatsSummary {
    /// Plain-text report with histograms.
    pub fn render_text(&self) -> String {
        let mut o = String::new();
        if self.empty {
            o.push_str("no records\n");
            return o;
        }
        let _ = writeln!(o, "records: {}", self.total);
        let _ = writeln!(o, "revised: {} (backtrack rate {:.4})", self.revised, self.backtrack_rate);
        for (k, v) in &self.terminal_counts {
            let _ = writeln!(o, "  terminal {k}: {v}");
        }
        let hist = |o: &mut String, title: &str, h: &mut dyn Iterator<Item = (String, usize)>| {
            let rows: Vec<_> = h.collect();
            let max = rows.iter().map(|r| r.1).max().unwrap_or(0);
            let _ = writeln!(o, "{title}:");
            if rows.is_empty() {
                let _ = writeln!(o, "  (none)");
            }
            for (k, n) in rows {
                let _ = writeln!(o, "  {k:>9} {n:>6} {}", bar(n, max));
            }
        };
        hist(&mut o, "backtrack depth", &mut self.depth_histogram.iter().map(|(k, v)| (k.to_string(), *v)));
        hist(&mut o, "absolute unsafe step", &mut self.unsafe_step_histogram.iter().map(|(k, v)| (k.to_string(), *v)));
        hist(
            &mut o,
            "relative unsafe position",
            &mut self
                .relative_unsafe_histogram
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("{:.1}-{:.1}", i as f64 / 10.0, (i + 1) as f64 / 10.0), *v)),
        );
        let _ = writeln!(o, "mean step value by index:");
        for m in &self.mean_value_by_step {
            let _ = writeln!(o, "  {:>9} {:.4} (n={})", m.index, m.mean_value, m.count);
        }
        for (name, m) in [("revised", &self.margins_revised), ("unrevised", &self.margins_unrevised)] {
            let _ = writeln!(
                o,
                "margin V-gamma [{name}]: n={} mean={:.4} median={:.4} min={:.4} max={:.4}",
                m.count, m.mean, m.median, m.min, m.max
            );
        }
        let c = &self.counters;
        let _ = writeln!(
            o,
            "calls: student_gen={} ({} tok) teacher_score={} ({} tok) teacher_topk={} teacher_gen={} ({} tok)",
            c.student_gen_calls,
            c.student_gen_tokens,
            c.teacher_score_calls,
            c.teacher_scored_tokens,
            c.teacher_topk_calls,
            c.teacher_gen_calls,
            c.teacher_gen_tokens
        );
        o
    }
}
