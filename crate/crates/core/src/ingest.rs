//! Dataset loading, seeded sampling, few-shot exemplars and the append-only
//! run store.
//!
//! The run store is line-delimited JSON, one [`RunRecord`] per line. Each
//! record is written with a single `write_all` followed by `sync_data`, so
//! a crash can at worst leave one torn trailing line. Readers skip and
//! report it; [`RunStore::open`] truncates it before appending again.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{McqItem, RunKey, RunRecord};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: no valid records ({rejected} rejected)")]
    NoValidRecords { path: PathBuf, rejected: usize },
    #[error("duplicate item ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("unsupported dataset format {0:?}")]
    UnsupportedFormat(String),
    #[error("requested {requested} items but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("exemplar set needs exactly 3 items, got {0}")]
    ExemplarCount(usize),
    #[error("exemplars overlap the evaluation items: {}", .0.join(", "))]
    ExemplarOverlap(Vec<String>),
    #[error("run store already holds {0}")]
    DuplicateRun(RunKey),
    #[error("serializing run record: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiagnostic {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(IngestError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub records: Vec<McqItem>,
    pub diagnostics: Vec<LineDiagnostic>,
}

/// Loads a JSONL dataset, one item per line. Malformed lines become
/// diagnostics; duplicate ids are an error.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<DatasetFile, IngestError> {
    let DatasetFormat::Jsonl = format;
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<McqItem>(line) {
            Ok(item) => records.push(item),
            Err(e) => diagnostics.push(LineDiagnostic {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.id()).or_default() += 1;
    }
    let dups: Vec<String> = counts
        .into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|(id, _)| id.to_string())
        .collect();
    if !dups.is_empty() {
        return Err(IngestError::DuplicateIds(dups));
    }
    if records.is_empty() {
        return Err(IngestError::NoValidRecords {
            path: path.to_path_buf(),
            rejected: diagnostics.len(),
        });
    }
    Ok(DatasetFile {
        path: path.to_path_buf(),
        records,
        diagnostics,
    })
}

/// Draws `n` distinct items uniformly without replacement. The result
/// depends only on `(items, n, seed)`.
pub fn sample_items(items: &[McqItem], n: usize, seed: u64) -> Result<Vec<McqItem>, IngestError> {
    if n > items.len() {
        return Err(IngestError::SampleTooLarge {
            requested: n,
            available: items.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let (chosen, _) = idx.partial_shuffle(&mut rng, n);
    Ok(chosen.iter().map(|&i| items[i].clone()).collect())
}

/// Exactly three in-context exemplars with known gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarSet {
    items: Vec<McqItem>,
}

impl ExemplarSet {
    pub fn new(items: Vec<McqItem>) -> Result<Self, IngestError> {
        if items.len() != 3 {
            return Err(IngestError::ExemplarCount(items.len()));
        }
        Ok(ExemplarSet { items })
    }

    pub fn items(&self) -> &[McqItem] {
        &self.items
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(McqItem::id)
    }

    /// Errors with the shared ids when any exemplar is also an evaluation item.
    pub fn ensure_disjoint(&self, eval: &[McqItem]) -> Result<(), IngestError> {
        let ids: HashSet<&str> = self.ids().collect();
        let mut overlap: Vec<String> = eval
            .iter()
            .filter(|it| ids.contains(it.id()))
            .map(|it| it.id().to_string())
            .collect();
        overlap.sort();
        overlap.dedup();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(IngestError::ExemplarOverlap(overlap))
        }
    }
}

pub fn load_exemplars(path: &Path) -> Result<ExemplarSet, IngestError> {
    let ds = load_dataset(path, DatasetFormat::Jsonl)?;
    ExemplarSet::new(ds.records)
}

#[derive(Debug, Clone, Default)]
pub struct LoadedRuns {
    pub records: Vec<RunRecord>,
    pub warnings: Vec<String>,
}

/// Reads a run store without modifying it. A missing file is an empty store.
pub fn load_runs(path: &Path) -> Result<LoadedRuns, IngestError> {
    if !path.exists() {
        return Ok(LoadedRuns::default());
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    Ok(parse_runs(&bytes))
}

fn parse_runs(bytes: &[u8]) -> LoadedRuns {
    let mut out = LoadedRuns::default();
    let mut seen = HashSet::new();
    let text = String::from_utf8_lossy(bytes);
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    let last = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // No trailing newline means the last write never completed.
        if i + 1 == last && !complete {
            out.warnings
                .push(format!("line {}: torn trailing record skipped", i + 1));
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(rec) => {
                if seen.insert(rec.key()) {
                    out.records.push(rec);
                } else {
                    out.warnings
                        .push(format!("line {}: duplicate run {} ignored", i + 1, rec.key()));
                }
            }
            Err(e) => out
                .warnings
                .push(format!("line {}: unreadable record skipped: {e}", i + 1)),
        }
    }
    out
}

/// Single-writer, append-only run store with resume support.
#[derive(Debug)]
pub struct RunStore {
    path: PathBuf,
    file: File,
    len: u64,
    records: Vec<RunRecord>,
    index: HashMap<RunKey, usize>,
    warnings: Vec<String>,
}

impl RunStore {
    /// Opens (or creates) a store, loading existing records and cutting off
    /// a torn trailing line so later appends start on a clean boundary.
    pub fn open(path: &Path) -> Result<Self, IngestError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(path))?;
        let loaded = parse_runs(&bytes);
        let mut len = bytes.len() as u64;
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
            file.set_len(keep as u64).map_err(io_err(path))?;
            len = keep as u64;
        }
        let index = loaded
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.key(), i))
            .collect();
        Ok(RunStore {
            path: path.to_path_buf(),
            file,
            len,
            records: loaded.records,
            index,
            warnings: loaded.warnings,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &RunKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn get(&self, key: &RunKey) -> Option<&RunRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Appends one record durably. On a failed write the file is cut back
    /// to the last complete record.
    pub fn append(&mut self, record: RunRecord) -> Result<(), IngestError> {
        let key = record.key();
        if self.index.contains_key(&key) {
            return Err(IngestError::DuplicateRun(key));
        }
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        let written = self
            .file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .and_then(|_| self.file.sync_data());
        if let Err(e) = written {
            let _ = self.file.set_len(self.len);
            return Err(io_err(&self.path)(e));
        }
        self.len += line.len() as u64;
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }
}
