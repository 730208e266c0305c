//! Batch orchestration: bounded worker pool, streaming sink, resumable
//! checkpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::synthesize;
use crate::dataio::{self, CompletionKey, DataError, RecordSink, SftRecord};
use crate::policy::PolicyBackend;
use crate::types::{CallCounters, ConfigError, Method, Question, RunConfig, Terminal};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub method: Method,
    pub output: PathBuf,
    pub checkpoint: PathBuf,
    /// Failed trajectories land here instead of the dataset.
    pub failures: PathBuf,
    /// Discard output, failures and checkpoint before starting.
    pub fresh_start: bool,
    /// Stop scheduling after this many records are written; results still in
    /// flight are dropped, as if the process had been killed.
    pub stop_after: Option<usize>,
    pub checkpoint_every: usize,
}

impl BatchOptions {
    pub fn new(method: Method, output: impl Into<PathBuf>) -> Self {
        let output = output.into();
        let with_suffix = |s: &str| {
            let mut p = output.as_os_str().to_owned();
            p.push(s);
            PathBuf::from(p)
        };
        Self {
            method,
            checkpoint: with_suffix(".ckpt"),
            failures: with_suffix(".failures.jsonl"),
            output,
            fresh_start: false,
            stop_after: None,
            checkpoint_every: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scheduled: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
    pub terminal_counts: BTreeMap<String, usize>,
    pub counters: CallCounters,
    pub interrupted: bool,
}

impl RunSummary {
    /// 1 when any trajectory failed or the run stopped before finishing.
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 || self.interrupted {
            1
        } else {
            0
        }
    }
}

fn existing_keys(path: &Path) -> Result<BTreeSet<CompletionKey>, DataError> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let read = dataio::read_records(path)?;
    for w in &read.warnings {
        tracing::warn!("{}: {w}", path.display());
    }
    Ok(read.records.iter().map(SftRecord::key).collect())
}

/// Synthesizes `samples_per_question` trajectories per question with at most
/// `concurrency_limit` in flight. Records are appended as they finish; a
/// re-run skips every key already in the checkpoint or the output file.
pub fn run_batch(
    student: &dyn PolicyBackend,
    teacher: &dyn PolicyBackend,
    questions: &[Question],
    cfg: &RunConfig,
    opts: &BatchOptions,
) -> Result<RunSummary, BatchError> {
    cfg.validate()?;
    let (mut done, mut sink, mut failures) = if opts.fresh_start {
        if opts.checkpoint.exists() {
            std::fs::remove_file(&opts.checkpoint).map_err(|e| DataError::io(&opts.checkpoint, e))?;
        }
        (BTreeSet::new(), RecordSink::create(&opts.output)?, RecordSink::create(&opts.failures)?)
    } else {
        let mut done = dataio::checkpoint_load(&opts.checkpoint)?;
        done.extend(existing_keys(&opts.output)?);
        (done, RecordSink::open(&opts.output)?, RecordSink::open(&opts.failures)?)
    };

    let method = opts.method;
    let mut summary = RunSummary::default();
    let mut jobs = Vec::new();
    for q in questions {
        for i in 0..cfg.samples_per_question {
            if done.contains(&(q.id.clone(), i, method)) {
                summary.skipped += 1;
            } else {
                jobs.push((q, i));
            }
        }
    }
    summary.scheduled = jobs.len();
    let fingerprint = cfg.fingerprint();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = cfg.concurrency_limit.min(jobs.len());
    let mut since_save = 0usize;
    let mut first_err: Option<DataError> = None;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, stop) = (&jobs, &next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(q, i)) = jobs.get(j) else { break };
                let t = synthesize(method, student, teacher, q, i, cfg);
                if tx.send(t).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for t in rx {
            if stop.load(Ordering::SeqCst) {
                continue;
            }
            let mut rec = SftRecord::from_trajectory(&t, &fingerprint);
            if rec.terminal != Terminal::Failed {
                if let Err(e) = rec.validate(Some(cfg.gamma0), Some(cfg.entropy_top_k)) {
                    rec.terminal = Terminal::Failed;
                    rec.failure = Some(format!("record failed validation: {e}"));
                }
            }
            let written = if rec.terminal == Terminal::Failed {
                tracing::warn!("{}#{} failed: {}", rec.question_id, rec.sample_index, rec.failure.as_deref().unwrap_or(""));
                summary.failed += 1;
                failures.append(&rec)
            } else {
                summary.completed += 1;
                sink.append(&rec).map(|()| {
                    done.insert(rec.key());
                })
            };
            *summary.terminal_counts.entry(rec.terminal.as_str().to_string()).or_default() += 1;
            summary.counters.add(&rec.counters);
            if let Err(e) = written {
                first_err.get_or_insert(e);
                stop.store(true, Ordering::SeqCst);
                continue;
            }
            since_save += 1;
            if since_save >= opts.checkpoint_every.max(1) {
                since_save = 0;
                if let Err(e) = dataio::checkpoint_save(&opts.checkpoint, &done) {
                    tracing::warn!("checkpoint save failed: {e}");
                }
            }
            if opts.stop_after.is_some_and(|n| sink.written() + failures.written() >= n) {
                summary.interrupted = true;
                stop.store(true, Ordering::SeqCst);
            }
        }
    });

    dataio::checkpoint_save(&opts.checkpoint, &done)?;
    if let Some(e) = first_err {
        return Err(e.into());
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::fixtures;

    fn questions(n: usize) -> Vec<Question> {
        (0..n).map(|i| Question::new(format!("q{i}"), "Q")).collect()
    }

    #[test]
    fn kill_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = fixtures::delayed_pair();
        let qs = questions(3);
        let cfg = RunConfig { samples_per_question: 2, concurrency_limit: 1, ..RunConfig::default() };
        let mut opts = BatchOptions::new(Method::Motab, dir.path().join("out.jsonl"));
        opts.stop_after = Some(4);
        let a = run_batch(&s, &t, &qs, &cfg, &opts).unwrap();
        assert!(a.interrupted);
        assert_eq!(a.completed, 4);
        opts.stop_after = None;
        let b = run_batch(&s, &t, &qs, &cfg, &opts).unwrap();
        assert_eq!((b.skipped, b.scheduled, b.completed), (4, 2, 2));
        let recs = dataio::read_records(&opts.output).unwrap().records;
        let keys: BTreeSet<_> = recs.iter().map(SftRecord::key).collect();
        assert_eq!((recs.len(), keys.len()), (6, 6));
    }

    #[test]
    fn corrupt_checkpoint_needs_fresh_start() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = fixtures::delayed_pair();
        let cfg = RunConfig { samples_per_question: 1, ..RunConfig::default() };
        let mut opts = BatchOptions::new(Method::Motab, dir.path().join("out.jsonl"));
        std::fs::write(&opts.checkpoint, "garbage").unwrap();
        assert!(matches!(run_batch(&s, &t, &questions(2), &cfg, &opts), Err(BatchError::Data(DataError::Checkpoint(_)))));
        opts.fresh_start = true;
        let r = run_batch(&s, &t, &questions(2), &cfg, &opts).unwrap();
        assert_eq!(r.completed, 2);
    }
}
