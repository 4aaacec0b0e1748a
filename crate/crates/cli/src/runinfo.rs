//! `run.json`: what a command was asked to do, what it read, and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::AppConfig;
use crate::error::CliError;

pub const RUN_FILE: &str = "run.json";

/// Hash of a file as a git blob (`blob <len>\0<bytes>`), hex-encoded SHA-256.
pub fn blob_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

/// Content hash of a file, or of a directory as the sorted list of its
/// files' relative paths and blob hashes.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    if path.is_file() {
        return blob_hash(path);
    }
    if !path.is_dir() {
        return Err(CliError::Data(format!("{} does not exist", path.display())));
    }
    let mut entries = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
            entries.push(format!(
                "{} {}\n",
                rel.to_string_lossy(),
                blob_hash(entry.path())?
            ));
        }
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", entries.len()).as_bytes());
    for e in &entries {
        h.update(e.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub config: AppConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock seconds per phase, plus `total`.
    pub timings: BTreeMap<String, f64>,
    pub summary: serde_json::Value,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunRecord {
    pub fn new(command: &str, config: &AppConfig) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            summary: serde_json::Value::Null,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = content_hash(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Runs `f`, recording its duration under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(phase.into()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        if let Some(t) = self.started {
            self.timings
                .insert("total".into(), t.elapsed().as_secs_f64());
        }
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_FILE);
        let mut text =
            serde_json::to_string_pretty(&self).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_convention() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, b"hello\n").unwrap();
        // sha256 of "blob 6\0hello\n"
        let mut h = Sha256::new();
        h.update(b"blob 6\0hello\n");
        assert_eq!(blob_hash(&p).unwrap(), hex::encode(h.finalize()));
    }

    #[test]
    fn directory_hash_tracks_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/x"), b"1").unwrap();
        std::fs::write(dir.path().join("y"), b"2").unwrap();
        let a = content_hash(dir.path()).unwrap();
        assert_eq!(a, content_hash(dir.path()).unwrap());
        std::fs::write(dir.path().join("y"), b"3").unwrap();
        assert_ne!(a, content_hash(dir.path()).unwrap());
        assert!(content_hash(&dir.path().join("missing")).is_err());
    }
}
