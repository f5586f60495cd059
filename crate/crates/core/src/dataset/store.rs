//! Append-only JSON-lines annotation store.
//!
//! Every accepted record is written and synced before the append returns.
//! Readers resolve duplicate `(annotator, instance, robot)` keys last-write-wins.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::rating::TraversabilityRating;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub instance_id: String,
    pub robot_id: String,
    pub rating: TraversabilityRating,
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
}

impl AnnotationRecord {
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.annotator_id, &self.instance_id, &self.robot_id)
    }
}

/// A store line whose rating has not been range-checked yet.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub(crate) struct RawAnnotation {
    pub annotator_id: String,
    pub instance_id: String,
    pub robot_id: String,
    pub rating: i64,
    #[allow(dead_code)]
    #[serde(default)]
    pub timestamp: i64,
}

pub(crate) enum RawAnnotationLine {
    Record(RawAnnotation),
    Malformed(String),
}

pub(crate) fn read_raw_annotations(path: &Path) -> Result<Vec<RawAnnotationLine>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(match serde_json::from_str::<RawAnnotation>(&line) {
            Ok(raw) => RawAnnotationLine::Record(raw),
            Err(e) => RawAnnotationLine::Malformed(e.to_string()),
        });
    }
    Ok(out)
}

/// Read every record in file order. Blank lines are skipped; any other
/// unparseable line is an error naming its line number.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(DatasetError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Collapse duplicate keys last-write-wins. Each surviving record keeps the
/// position of the key's first appearance.
pub fn latest_per_key(records: &[AnnotationRecord]) -> Vec<AnnotationRecord> {
    let mut slot: HashMap<(&str, &str, &str), usize> = HashMap::new();
    let mut out: Vec<AnnotationRecord> = Vec::new();
    for r in records {
        match slot.get(&r.key()) {
            Some(&i) => out[i] = r.clone(),
            None => {
                slot.insert(r.key(), out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

pub fn to_jsonl(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Durable append-only store with an in-memory mirror for snapshot reads.
pub struct AnnotationStore {
    path: PathBuf,
    writer: Mutex<File>,
    records: RwLock<Vec<AnnotationRecord>>,
}

impl AnnotationStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let path = path.into();
        let records = read_annotations(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(AnnotationStore {
            path,
            writer: Mutex::new(file),
            records: RwLock::new(records),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record; returns only after the line is synced to disk.
    pub fn append(&self, record: &AnnotationRecord) -> Result<(), DatasetError> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let mut file = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let io_err = |source| DatasetError::Io {
            path: self.path.clone(),
            source,
        };
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.sync_data().map_err(io_err)?;
        self.records
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .push(record.clone());
        Ok(())
    }

    /// Every record ever appended, in write order.
    pub fn all(&self) -> Vec<AnnotationRecord> {
        self.records.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Deduplicated records (last write wins per key).
    pub fn snapshot(&self) -> Vec<AnnotationRecord> {
        latest_per_key(&self.records.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn export_jsonl(&self) -> String {
        to_jsonl(&self.snapshot())
    }
}
