//! Temporal-difference credit assignment and safe bifurcation point
//! selection.
//!
//! The question-only context is treated as a step-0 state with value 1.0,
//! so `delta_1 = V_1 - 1` and step 1 is always a legal rewind target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BacktrackError {
    #[error("value list is empty")]
    Empty,
    #[error("values ({values}) and thresholds ({thresholds}) differ in length")]
    LengthMismatch { values: usize, thresholds: usize },
    #[error("breach index {breach} outside 1..={len}")]
    BreachOutOfRange { breach: usize, len: usize },
    #[error("step {0} is not a breach (value >= threshold)")]
    NotABreach(usize),
    #[error("value {value} at step {index} outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktrackResult {
    /// 1-based step `l*` the teacher restarts from.
    pub safe_point: usize,
    pub td_errors: Vec<f64>,
    /// Breach index minus safe point.
    pub depth: usize,
}

/// `delta_k = V_k - V_{k-1}` with `V_0 = 1`.
pub fn td_errors(values: &[f64]) -> Result<Vec<f64>, BacktrackError> {
    if values.is_empty() {
        return Err(BacktrackError::Empty);
    }
    for (i, &v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(BacktrackError::ValueOutOfRange { index: i + 1, value: v });
        }
    }
    let mut prev = 1.0;
    Ok(values
        .iter()
        .map(|&v| {
            let d = v - prev;
            prev = v;
            d
        })
        .collect())
}

/// Argmin of `delta_k` over `k <= breach` whose preceding step was safe.
/// Ties go to the smallest `k`.
pub fn select_safe_point(values: &[f64], thresholds: &[f64], breach: usize) -> Result<usize, BacktrackError> {
    Ok(backtrack(values, thresholds, breach)?.safe_point)
}

pub fn backtrack(values: &[f64], thresholds: &[f64], breach: usize) -> Result<BacktrackResult, BacktrackError> {
    if values.len() != thresholds.len() {
        return Err(BacktrackError::LengthMismatch { values: values.len(), thresholds: thresholds.len() });
    }
    if breach == 0 || breach > values.len() {
        return Err(BacktrackError::BreachOutOfRange { breach, len: values.len() });
    }
    let values = &values[..breach];
    let thresholds = &thresholds[..breach];
    if values[breach - 1] >= thresholds[breach - 1] {
        return Err(BacktrackError::NotABreach(breach));
    }
    let deltas = td_errors(values)?;

    let mut best = 1usize;
    let mut best_delta = deltas[0];
    for k in 2..=breach {
        let predecessor_safe = values[k - 2] >= thresholds[k - 2];
        if predecessor_safe && deltas[k - 1] < best_delta {
            best = k;
            best_delta = deltas[k - 1];
        }
    }
    Ok(BacktrackResult { safe_point: best, td_errors: deltas, depth: breach - best })
}
