use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, LineDiagnostic, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Covid,
    NonCovid,
    Normal,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Covid, Class::NonCovid, Class::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Covid => "covid",
            Class::NonCovid => "non_covid",
            Class::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lung_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infection_mask: Option<PathBuf>,
    pub class: Class,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<u32>,
}

impl DatasetRecord {
    pub fn new(id: impl Into<String>, image: impl Into<PathBuf>, class: Class) -> Self {
        Self { id: id.into(), image: image.into(), lung_mask: None, infection_mask: None, class, split: None, fold: None }
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.image).chain(self.lung_mask.iter()).chain(self.infection_mask.iter())
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.image);
        self.lung_mask.as_mut().map(join);
        self.infection_mask.as_mut().map(join);
    }
}

/// Parses JSON-lines manifest text. Blank lines are skipped. With a `base`
/// directory, relative paths are resolved against it and must exist.
///
/// All problems are collected and reported together, one per line.
pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: DatasetRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(LineDiagnostic { line: line_no, message: e.to_string() });
                continue;
            }
        };
        if let Some(first) = seen.get(&rec.id) {
            problems.push(LineDiagnostic {
                line: line_no,
                message: format!("duplicate id `{}` (lines {first} and {line_no})", rec.id),
            });
            continue;
        }
        seen.insert(rec.id.clone(), line_no);
        if let Some(base) = base {
            rec.resolve(base);
            for p in rec.paths() {
                if !p.exists() {
                    problems.push(LineDiagnostic { line: line_no, message: format!("missing file {}", p.display()) });
                }
            }
        }
        records.push(rec);
    }
    if problems.is_empty() {
        Ok(records)
    } else {
        Err(Error::Manifest(problems))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, Some(base))
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
