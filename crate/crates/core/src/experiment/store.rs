use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::finetune::RunRecord;

/// Append-only JSON-lines file, one [`RunRecord`] per line.
///
/// Appends take an exclusive advisory lock on the file, so concurrent writers
/// never interleave. A line only counts once its terminating newline is on
/// disk; an unterminated tail left by a killed writer is ignored on read and
/// cut off by the next append.
#[derive(Clone, Debug)]
pub struct ResultStore {
    path: PathBuf,
}

impl ResultStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_text(&self) -> Result<String> {
        match fs::read_to_string(&self.path) {
            Ok(s) => Ok(s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }

    fn parse(text: &str, path: &Path) -> Result<Vec<RunRecord>> {
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        if complete.len() < text.len() {
            log::warn!("{}: ignoring an unterminated final line", path.display());
        }
        complete
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect()
    }

    /// Every complete record, in file order.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        Self::parse(&self.read_text()?, &self.path)
    }

    pub fn fingerprints(&self) -> Result<HashSet<String>> {
        Ok(self.records()?.into_iter().map(|r| r.fingerprint).collect())
    }

    /// Appends `record` unless a record with the same fingerprint is already
    /// stored. Returns whether a line was written.
    pub fn append(&self, record: &RunRecord) -> Result<bool> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let io = |e| Error::io(&self.path, e);
        let mut f: File = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(&self.path).map_err(io)?;
        f.lock().map_err(io)?;
        let result = (|| {
            let mut text = String::new();
            f.read_to_string(&mut text).map_err(io)?;
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            if keep < text.len() {
                log::warn!("{}: dropping an unterminated final line", self.path.display());
                f.set_len(keep as u64).map_err(io)?;
            }
            if Self::parse(&text[..keep], &self.path)?.iter().any(|r| r.fingerprint == record.fingerprint) {
                return Ok(false);
            }
            let mut line = serde_json::to_string(record)?;
            line.push('\n');
            f.seek(SeekFrom::Start(keep as u64)).map_err(io)?;
            f.write_all(line.as_bytes()).map_err(io)?;
            f.sync_data().map_err(io)?;
            Ok(true)
        })();
        f.unlock().map_err(io)?;
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    pub(crate) fn record(fp: &str, value: f64) -> RunRecord {
        RunRecord {
            fingerprint: fp.into(),
            seed: 0,
            tags: BTreeMap::new(),
            metric: "mean_auc".into(),
            epochs: vec![],
            best_epoch: 1,
            best_metric: value,
            test_metric: Some(value),
            convergence_epoch: 1,
            trainable_param_count: 1,
            total_param_count: 1,
            deterministic: false,
        }
    }

    #[test]
    fn appends_are_deduplicated_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ResultStore::new(dir.path().join("sub/runs.jsonl"));
        assert!(s.records().unwrap().is_empty());
        assert!(s.append(&record("a", 0.5)).unwrap());
        assert!(s.append(&record("b", 0.25)).unwrap());
        assert!(!s.append(&record("a", 0.9)).unwrap());
        let r = s.records().unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0], record("a", 0.5));
    }

    #[test]
    fn torn_tail_is_ignored_then_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let s = ResultStore::new(dir.path().join("runs.jsonl"));
        s.append(&record("a", 0.5)).unwrap();
        let mut f = OpenOptions::new().append(true).open(s.path()).unwrap();
        f.write_all(b"{\"fingerprint\":\"b\",\"se").unwrap();
        assert_eq!(s.records().unwrap().len(), 1);
        s.append(&record("c", 0.1)).unwrap();
        let text = fs::read_to_string(s.path()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn corrupt_complete_line_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.jsonl");
        fs::write(&p, "not json\n").unwrap();
        assert_eq!(ResultStore::new(p).records().unwrap_err().kind(), "format");
    }
}
