//! On-disk layout of a workflow deployment:
//!
//! ```text
//! <dir>/workflow.json   configuration fixed at creation
//! <dir>/events.jsonl    append-only event log
//! <dir>/masks/          proposal, edit and MD masks (PGM)
//! <dir>/seeds.jsonl     manifest of pre-existing seed masks
//! <dir>/models/         weights written by training jobs
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use cxrseg_core::io::{load_manifest, write_manifest};
use cxrseg_core::workflow::{Clock, DirMaskStore, SystemClock, Workflow, WorkflowConfig};
use cxrseg_core::DatasetRecord;

#[derive(Debug, Clone)]
pub struct StateDir {
    root: PathBuf,
}

impl StateDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn masks(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn seeds(&self) -> PathBuf {
        self.root.join("seeds.jsonl")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn current_weights(&self) -> PathBuf {
        self.models().join("current.segw")
    }

    fn config_path(&self) -> PathBuf {
        self.root.join("workflow.json")
    }

    /// The stored configuration, or `fallback` written as the configuration
    /// of a new deployment. A log is only ever replayed under the
    /// configuration it was written with.
    pub fn config(&self, fallback: &WorkflowConfig) -> anyhow::Result<WorkflowConfig> {
        let path = self.config_path();
        if path.exists() {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
        }
        std::fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        std::fs::write(&path, serde_json::to_string_pretty(fallback)?)?;
        Ok(fallback.clone())
    }

    pub fn open(&self, fallback: &WorkflowConfig) -> anyhow::Result<Workflow> {
        self.open_with_clock(fallback, Box::new(SystemClock))
    }

    pub fn open_with_clock(&self, fallback: &WorkflowConfig, clock: Box<dyn Clock>) -> anyhow::Result<Workflow> {
        let config = self.config(fallback)?;
        let store = DirMaskStore::new(self.masks())?;
        Ok(Workflow::open(config, self.events(), Box::new(store), clock)?)
    }

    pub fn read_seeds(&self) -> anyhow::Result<Vec<DatasetRecord>> {
        let path = self.seeds();
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(load_manifest(&path)?)
    }

    pub fn write_seeds(&self, records: &[DatasetRecord]) -> anyhow::Result<()> {
        Ok(write_manifest(self.seeds(), records)?)
    }
}
