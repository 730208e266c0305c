//! Question ingestion, dataset records, checkpoints and run statistics.
//!
//! Everything on disk is newline-delimited JSON except the checkpoint, which
//! is a hashed list of completion keys.

pub mod checkpoint;
pub mod f17;
pub mod questions;
pub mod records;
pub mod stats;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{checkpoint_load, checkpoint_save, CompletionKey};
pub use questions::{read_questions, QuestionReader};
pub use records::{canonical_order, read_records, write_records, RecordSink, RecordsRead, SftRecord};
pub use stats::{trajectory_stats, StatsSummary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate question id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("{0} is locked by another writer")]
    Locked(PathBuf),
    #[error("checkpoint refused: {0}")]
    Checkpoint(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), msg: e.to_string() }
    }
}
