//! Completion-set checkpoint.
//!
//! ```text
//! motab-checkpoint v1
//! ["q1",0,"motab"]
//! ...
//! sha256:<hex of every preceding byte>
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataError;
use crate::types::Method;

pub const HEADER: &str = "motab-checkpoint v1";

pub type CompletionKey = (String, u64, Method);

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(done: &BTreeSet<CompletionKey>) -> String {
    let mut body = String::with_capacity(32 * done.len() + 64);
    body.push_str(HEADER);
    body.push('\n');
    for (q, i, m) in done {
        body.push_str(&serde_json::to_string(&(q, i, m)).expect("key serializes"));
        body.push('\n');
    }
    let digest = Sha256::digest(body.as_bytes());
    body.push_str("sha256:");
    body.push_str(&hex(&digest));
    body.push('\n');
    body
}

pub fn decode(text: &str) -> Result<BTreeSet<CompletionKey>, DataError> {
    let bad = |m: &str| Err(DataError::Checkpoint(m.to_string()));
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let Some(split) = trimmed.rfind('\n') else { return bad("missing footer") };
    let (body, footer) = (&text[..split + 1], &trimmed[split + 1..]);
    let Some(expected) = footer.strip_prefix("sha256:") else { return bad("missing footer") };
    if hex(&Sha256::digest(body.as_bytes())) != expected {
        return bad("content hash mismatch");
    }
    let mut lines = body.lines();
    match lines.next() {
        Some(HEADER) => {}
        Some(other) => return Err(DataError::Checkpoint(format!("unsupported header {other:?}"))),
        None => return bad("empty checkpoint"),
    }
    let mut out = BTreeSet::new();
    for (i, line) in lines.enumerate() {
        let key: CompletionKey = serde_json::from_str(line)
            .map_err(|e| DataError::Checkpoint(format!("entry {}: {e}", i + 1)))?;
        out.insert(key);
    }
    Ok(out)
}

/// Atomic save: write a sibling temp file, fsync, rename over `path`.
pub fn checkpoint_save(path: &Path, done: &BTreeSet<CompletionKey>) -> Result<(), DataError> {
    let io = |e| DataError::io(path, e);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(encode(done).as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// Missing file loads as the empty set; anything unreadable is refused.
pub fn checkpoint_load(path: &Path) -> Result<BTreeSet<CompletionKey>, DataError> {
    match fs::read(path) {
        Ok(bytes) => {
            let text = String::from_utf8(bytes).map_err(|_| DataError::Checkpoint("not UTF-8".into()))?;
            decode(&text)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeSet::new()),
        Err(e) => Err(DataError::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(q: &str, i: u64) -> CompletionKey {
        (q.to_string(), i, Method::Motab)
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck");
        let set: BTreeSet<_> = [key("q1", 0)].into();
        checkpoint_save(&p, &set).unwrap();
        assert_eq!(checkpoint_load(&p).unwrap(), set);
        assert!(checkpoint_load(&dir.path().join("missing")).unwrap().is_empty());
    }

    #[test]
    fn corrupt_byte_refused() {
        let set: BTreeSet<_> = [key("q1", 0), key("q2", 3)].into();
        let text = encode(&set);
        for pos in [0, HEADER.len() + 3, text.len() - 5] {
            let mut bytes = text.clone().into_bytes();
            bytes[pos] ^= 0x01;
            let t = String::from_utf8(bytes).unwrap();
            assert!(decode(&t).is_err(), "corruption at {pos} accepted");
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let text = encode(&BTreeSet::new()).replace("v1", "v2");
        // Hash still covers the original header, so recompute to isolate the version check.
        let body = "motab-checkpoint v2\n";
        let fixed = format!("{body}sha256:{}\n", hex(&Sha256::digest(body.as_bytes())));
        assert!(decode(&text).is_err());
        assert!(matches!(decode(&fixed), Err(DataError::Checkpoint(m)) if m.contains("header")));
    }

    #[test]
    fn large_set_loads_quickly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck");
        let set: BTreeSet<_> = (0..100_000u64).map(|i| (format!("q{i:06}"), i % 5, Method::Motab)).collect();
        checkpoint_save(&p, &set).unwrap();
        let t = std::time::Instant::now();
        let back = checkpoint_load(&p).unwrap();
        assert_eq!(back.len(), set.len());
        assert!(t.elapsed().as_secs_f64() < 1.0, "{:?}", t.elapsed());
    }
}
