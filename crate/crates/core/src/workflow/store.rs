use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::state::{EventRecord, WorkflowState};
use crate::error::{Error, LineDiagnostic, Result};
use crate::io::{read_mask, write_mask};
use crate::mask::BinaryMask;

/// Keyed storage for proposal and edited masks.
pub trait MaskStore: Send {
    fn put(&mut self, key: &str, mask: &BinaryMask) -> Result<()>;
    fn get(&self, key: &str) -> Result<BinaryMask>;
}

#[derive(Debug, Default)]
pub struct MemoryMaskStore {
    masks: HashMap<String, BinaryMask>,
}

impl MemoryMaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

impl MaskStore for MemoryMaskStore {
    fn put(&mut self, key: &str, mask: &BinaryMask) -> Result<()> {
        self.masks.insert(key.to_string(), mask.clone());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<BinaryMask> {
        self.masks.get(key).cloned().ok_or_else(|| Error::NotFound(format!("mask `{key}`")))
    }
}

/// Masks as portable-graymap files below a root directory; `/` in a key
/// becomes a subdirectory.
#[derive(Debug, Clone)]
pub struct DirMaskStore {
    root: PathBuf,
}

impl DirMaskStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        let mut p = self.root.clone();
        let parts: Vec<&str> = key.split('/').collect();
        for (i, part) in parts.iter().enumerate() {
            if part.is_empty() || *part == "." || *part == ".." || part.contains('\\') {
                return Err(Error::Usage(format!("invalid mask key `{key}`")));
            }
            if i + 1 == parts.len() {
                p.push(format!("{part}.pgm"));
            } else {
                p.push(part);
            }
        }
        Ok(p)
    }
}

impl MaskStore for DirMaskStore {
    fn put(&mut self, key: &str, mask: &BinaryMask) -> Result<()> {
        let path = self.path(key)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_mask(&path, mask)
    }

    fn get(&self, key: &str) -> Result<BinaryMask> {
        let path = self.path(key)?;
        if !path.exists() {
            return Err(Error::NotFound(format!("mask `{key}`")));
        }
        read_mask(&path)
    }
}

/// Source of event timestamps (milliseconds since the Unix epoch).
pub trait Clock: Send {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Deterministic clock that advances by a fixed step on every read.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
    step: u64,
}

impl ManualClock {
    pub fn new(start: u64, step: u64) -> Self {
        Self { now: AtomicU64::new(start), step }
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.fetch_add(self.step, Ordering::SeqCst)
    }
}

/// Append-only event log, one JSON record per line.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) the log and returns every record in it.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<EventRecord>)> {
        let path = path.as_ref().to_path_buf();
        let records = if path.exists() { Self::read(&path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok((Self { path, file }, records))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<EventRecord>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        let mut diags = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<EventRecord>(&line) {
                Ok(r) => out.push(r),
                Err(e) => diags.push(LineDiagnostic { line: i + 1, message: e.to_string() }),
            }
        }
        if !diags.is_empty() {
            return Err(Error::Manifest(diags));
        }
        Ok(out)
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Full state at a sequence number; replay continues after `state.last_seq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub state: WorkflowState,
}

impl Snapshot {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
