//! Output records and the append-only JSONL sink.

use std::fs::{File, OpenOptions, TryLockError};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{f17, DataError};
use crate::stitch;
use crate::types::{
    CallCounters, Method, StepRecord, StepSource, SynthTrajectory, Terminal, ValidationError,
};

/// One line of a synthesized dataset. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub question_id: String,
    pub sample_index: u64,
    pub method: Method,
    pub config_fingerprint: String,
    pub prompt: String,
    pub completion: String,
    pub separator: String,
    pub revised: bool,
    pub terminal: Terminal,
    pub rev_token: Option<String>,
    pub student_steps: Vec<String>,
    pub teacher_suffix: Option<String>,
    pub unsafe_step: Option<usize>,
    pub backtrack_point: Option<usize>,
    pub depth: Option<usize>,
    #[serde(with = "f17::opt_vec")]
    pub td_errors: Option<Vec<f64>>,
    #[serde(with = "f17::vec")]
    pub step_values: Vec<f64>,
    #[serde(with = "f17::vec")]
    pub step_thresholds: Vec<f64>,
    #[serde(with = "f17::vec")]
    pub step_entropies: Vec<f64>,
    pub step_sources: Vec<StepSource>,
    pub step_token_counts: Vec<usize>,
    /// Student steps plus separator-delimited steps of the teacher suffix.
    pub step_count: usize,
    pub counters: CallCounters,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Number of non-empty separator-delimited segments.
pub fn count_steps(text: &str, sep: &str) -> usize {
    text.split(sep).filter(|s| !s.trim().is_empty()).count()
}

impl SftRecord {
    pub fn from_trajectory(t: &SynthTrajectory, config_fingerprint: &str) -> Self {
        let suffix_steps = if t.revised { t.teacher_suffix.as_deref().map_or(0, |s| count_steps(s, &t.separator)) } else { 0 };
        Self {
            question_id: t.question_id.clone(),
            sample_index: t.sample_index,
            method: t.method,
            config_fingerprint: config_fingerprint.to_string(),
            prompt: t.prompt.clone(),
            completion: t.completion(),
            separator: t.separator.clone(),
            revised: t.revised,
            terminal: t.terminal,
            rev_token: t.rev_token.clone(),
            student_steps: t.student_steps.iter().map(|s| s.text.clone()).collect(),
            teacher_suffix: t.teacher_suffix.clone(),
            unsafe_step: t.unsafe_step,
            backtrack_point: t.backtrack_point,
            depth: t.depth(),
            td_errors: t.td_errors.clone(),
            step_values: t.student_steps.iter().map(|s| s.value).collect(),
            step_thresholds: t.student_steps.iter().map(|s| s.threshold).collect(),
            step_entropies: t.student_steps.iter().map(|s| s.entropy).collect(),
            step_sources: t.student_steps.iter().map(|s| s.source).collect(),
            step_token_counts: t.student_steps.iter().map(|s| s.token_count).collect(),
            step_count: t.student_steps.len() + suffix_steps,
            counters: t.counters,
            warnings: t.warnings.clone(),
            failure: t.failure.clone(),
        }
    }

    /// Rebuilds the trajectory; per-token scores are not stored and come back empty.
    pub fn to_trajectory(&self) -> Result<SynthTrajectory, ValidationError> {
        let n = self.student_steps.len();
        let lens = [
            self.step_values.len(),
            self.step_thresholds.len(),
            self.step_entropies.len(),
            self.step_sources.len(),
            self.step_token_counts.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(ValidationError::Record(format!("per-step arrays {lens:?} do not match {n} steps")));
        }
        let steps = (0..n)
            .map(|i| StepRecord {
                index: i + 1,
                text: self.student_steps[i].clone(),
                token_scores: Vec::new(),
                value: self.step_values[i],
                entropy: self.step_entropies[i],
                threshold: self.step_thresholds[i],
                safe: self.step_values[i] >= self.step_thresholds[i],
                source: self.step_sources[i],
                token_count: self.step_token_counts[i],
            })
            .collect();
        Ok(SynthTrajectory {
            question_id: self.question_id.clone(),
            sample_index: self.sample_index,
            method: self.method,
            prompt: self.prompt.clone(),
            separator: self.separator.clone(),
            student_steps: steps,
            revised: self.revised,
            rev_token: self.rev_token.clone(),
            teacher_suffix: self.teacher_suffix.clone(),
            unsafe_step: self.unsafe_step,
            backtrack_point: self.backtrack_point,
            td_errors: self.td_errors.clone(),
            terminal: self.terminal,
            counters: self.counters,
            warnings: self.warnings.clone(),
            failure: self.failure.clone(),
        })
    }

    /// Core invariants plus record-level consistency (completion text,
    /// depth, step count).
    pub fn validate(&self, gamma0: Option<f64>, top_k: Option<usize>) -> Result<(), ValidationError> {
        let bad = |m: String| Err(ValidationError::Record(m));
        if self.question_id.is_empty() {
            return bad("empty question_id".into());
        }
        if self.terminal == Terminal::Failed {
            return bad(format!("failed trajectory: {}", self.failure.as_deref().unwrap_or("no cause")));
        }
        let t = self.to_trajectory()?;
        t.validate(gamma0, top_k)?;
        if t.completion() != self.completion {
            return bad("completion does not match steps, rev_token and teacher_suffix".into());
        }
        if self.depth != t.depth() {
            return bad(format!("depth {:?} != unsafe_step - backtrack_point {:?}", self.depth, t.depth()));
        }
        let suffix = if self.revised { self.teacher_suffix.as_deref().map_or(0, |s| count_steps(s, &self.separator)) } else { 0 };
        if self.step_count != self.student_steps.len() + suffix {
            return bad(format!("step_count {} inconsistent", self.step_count));
        }
        if let Some(rev) = &self.rev_token {
            if self.revised {
                let off = stitch::rev_offset(&self.student_steps, &t.stitch_spec());
                if !self.completion[off..].starts_with(&format!(" {rev}")) {
                    return bad("revision token not at the stitch position".into());
                }
            }
        }
        Ok(())
    }

    pub fn key(&self) -> (String, u64, Method) {
        (self.question_id.clone(), self.sample_index, self.method)
    }

    /// Canonical single-line JSON (no trailing newline).
    pub fn to_line(&self) -> Result<String, DataError> {
        serde_json::to_string(self).map_err(|e| DataError::Serialize(e.to_string()))
    }
}

/// Append-only, exclusively locked JSONL writer. Each record is written and
/// flushed as one line.
#[derive(Debug)]
pub struct RecordSink {
    file: File,
    path: PathBuf,
    written: usize,
}

impl RecordSink {
    /// Opens for append, creating the file. A torn trailing line left by an
    /// interrupted writer is cut off so new records start on a fresh line.
    pub fn open(path: &Path) -> Result<Self, DataError> {
        Self::open_with(path, false)
    }

    /// Opens and discards any existing content.
    pub fn create(path: &Path) -> Result<Self, DataError> {
        Self::open_with(path, true)
    }

    fn open_with(path: &Path, truncate: bool) -> Result<Self, DataError> {
        let io = |e| DataError::io(path, e);
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path).map_err(io)?;
        match file.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(DataError::Locked(path.to_path_buf())),
            Err(TryLockError::Error(e)) => return Err(io(e)),
        }
        if truncate {
            file.set_len(0).map_err(io)?;
        } else {
            repair_tail(&mut file).map_err(io)?;
        }
        Ok(Self { file, path: path.to_path_buf(), written: 0 })
    }

    pub fn append(&mut self, record: &SftRecord) -> Result<(), DataError> {
        let mut line = record.to_line()?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| DataError::io(&self.path, e))?;
        self.file.flush().map_err(|e| DataError::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn repair_tail(file: &mut File) -> std::io::Result<()> {
    let len = file.metadata()?.len();
    if len == 0 {
        return Ok(());
    }
    let mut last = [0u8];
    file.seek(SeekFrom::Start(len - 1))?;
    file.read_exact(&mut last)?;
    if last[0] == b'\n' {
        return Ok(());
    }
    // Scan back for the last complete line.
    let mut pos = len;
    let mut buf = vec![0u8; 4096];
    while pos > 0 {
        let start = pos.saturating_sub(buf.len() as u64);
        let n = (pos - start) as usize;
        file.seek(SeekFrom::Start(start))?;
        file.read_exact(&mut buf[..n])?;
        if let Some(i) = buf[..n].iter().rposition(|&b| b == b'\n') {
            pos = start + i as u64 + 1;
            break;
        }
        pos = start;
    }
    tracing::warn!("dropping torn trailing line ({} bytes)", len - pos);
    file.set_len(pos)
}

/// Writes `records` to a fresh sink; returns the count.
pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a SftRecord>) -> Result<usize, DataError> {
    let mut sink = RecordSink::create(path)?;
    for r in records {
        sink.append(r)?;
    }
    Ok(sink.written())
}

#[derive(Debug, Clone, Default)]
pub struct RecordsRead {
    pub records: Vec<SftRecord>,
    pub warnings: Vec<String>,
}

/// Reads a dataset. A malformed final line is skipped with a warning; a
/// malformed line anywhere else is an error.
pub fn read_records(path: &Path) -> Result<RecordsRead, DataError> {
    let f = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_records_from(BufReader::new(f))
}

pub fn read_records_from<R: BufRead>(reader: R) -> Result<RecordsRead, DataError> {
    let mut out = RecordsRead::default();
    let mut pending: Option<(usize, String)> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: "<records>".into(), msg: e.to_string() })?;
        if let Some((n, msg)) = pending.take() {
            return Err(DataError::Malformed { line: n, msg });
        }
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SftRecord>(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => pending = Some((i + 1, e.to_string())),
        }
    }
    if let Some((n, msg)) = pending {
        out.warnings.push(format!("skipped malformed trailing line {n}: {msg}"));
    }
    Ok(out)
}

/// Sorts by `(question_id, sample_index, method)`.
pub fn canonical_order(records: &mut [SftRecord]) {
    records.sort_by_key(SftRecord::key);
}
