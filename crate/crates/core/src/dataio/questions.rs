//! Streaming question reader. One JSON object per line with `text`
//! (required), `id` and `metadata` (optional). Missing ids become the
//! zero-padded ordinal of the record.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::DataError;
use crate::types::Question;

#[derive(Deserialize)]
struct RawQuestion {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: Option<String>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

pub struct QuestionReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    ordinal: usize,
    seen: HashSet<String>,
}

impl QuestionReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let f = File::open(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self::new(BufReader::new(f)))
    }
}

impl<R: BufRead> QuestionReader<R> {
    pub fn new(reader: R) -> Self {
        Self { lines: reader.lines(), line_no: 0, ordinal: 0, seen: HashSet::new() }
    }

    fn parse(&mut self, line: &str) -> Result<Question, DataError> {
        let bad = |msg: String| DataError::Malformed { line: self.line_no, msg };
        let raw: RawQuestion = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let text = raw.text.filter(|t| !t.is_empty()).ok_or_else(|| bad("missing or empty `text`".into()))?;
        let id = match raw.id {
            None | Some(serde_json::Value::Null) => format!("{:06}", self.ordinal),
            Some(serde_json::Value::String(s)) if !s.is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(bad(format!("bad `id` {other}"))),
        };
        if !self.seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { line: self.line_no, id });
        }
        self.ordinal += 1;
        Ok(Question { id, text, metadata: raw.metadata })
    }
}

impl<R: BufRead> Iterator for QuestionReader<R> {
    type Item = Result<Question, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(DataError::Io { path: "<questions>".into(), msg: e.to_string() })),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}

pub fn read_questions(path: &Path) -> Result<Vec<Question>, DataError> {
    QuestionReader::open(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn read(s: &str) -> Result<Vec<Question>, DataError> {
        QuestionReader::new(Cursor::new(s)).collect()
    }

    #[test]
    fn explicit_ids_in_order() {
        let qs = read("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\",\"metadata\":{\"k\":1}}\n").unwrap();
        assert_eq!(qs.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(qs[1].metadata["k"], 1);
    }

    #[test]
    fn missing_text_names_line() {
        let e = read("{\"text\":\"x\"}\n\n{\"id\":\"b\"}\n").unwrap_err();
        assert!(matches!(e, DataError::Malformed { line: 3, .. }), "{e}");
    }

    #[test]
    fn auto_ids_and_duplicates() {
        let qs = read("{\"text\":\"x\"}\n{\"text\":\"y\"}\n").unwrap();
        assert_eq!(qs[0].id, "000000");
        assert_eq!(qs[1].id, "000001");
        assert!(matches!(read("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n"), Err(DataError::DuplicateId { line: 2, .. })));
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(read("{oops\n"), Err(DataError::Malformed { line: 1, .. })));
    }
}
