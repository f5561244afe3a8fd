//! Append-only run manifest: one JSON line per stage attempt.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    /// Hash of the stage name, its config snapshot and its input hashes.
    pub key: String,
    pub status: Status,
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) to blob hash.
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.jsonl";

    /// Opens the manifest in `dir`, reading any existing entries.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let entries = match std::fs::read_to_string(&path) {
            Ok(text) => text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(path.display(), i + 1, e.to_string())))
                .collect::<Result<_>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        Ok(Self { path, entries })
    }

    pub fn append(&mut self, entry: ManifestEntry) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(entry);
        Ok(())
    }

    /// Latest successful entry with this key whose outputs are still on disk
    /// unchanged.
    pub fn reusable(&self, key: &str, root: &Path) -> Option<&ManifestEntry> {
        self.entries.iter().rev().filter(|e| e.key == key && e.status == Status::Ok).find(|e| {
            e.outputs.iter().all(|(rel, h)| hash::file_hash(&root.join(rel)).is_ok_and(|actual| &actual == h))
        })
    }

    /// Latest successful entry for a stage.
    pub fn latest(&self, stage: &str) -> Option<&ManifestEntry> {
        self.entries.iter().rev().find(|e| e.stage == stage && e.status == Status::Ok)
    }

    /// Entry that produced `rel` with its current hash, if any.
    pub fn producer(&self, rel: &str, hash: &str) -> Option<&ManifestEntry> {
        self.entries.iter().rev().find(|e| e.status == Status::Ok && e.outputs.get(rel).is_some_and(|h| h == hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, key: &str, outputs: BTreeMap<String, String>) -> ManifestEntry {
        ManifestEntry {
            stage: stage.into(),
            key: key.into(),
            status: Status::Ok,
            inputs: BTreeMap::new(),
            outputs,
            wall_ms: 1,
            config: serde_json::Value::Null,
            error: None,
        }
    }

    #[test]
    fn appends_and_reuses_only_intact_outputs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "x").unwrap();
        let h = hash::file_hash(&dir.path().join("a.txt")).unwrap();
        let mut m = Manifest::open(dir.path()).unwrap();
        m.append(entry("corpus", "k1", [("a.txt".to_string(), h)].into())).unwrap();
        let m = Manifest::open(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert!(m.reusable("k1", dir.path()).is_some());
        assert!(m.reusable("k2", dir.path()).is_none());
        std::fs::write(dir.path().join("a.txt"), "changed").unwrap();
        assert!(m.reusable("k1", dir.path()).is_none());
    }
}
