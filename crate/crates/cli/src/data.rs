//! JSONL and CSV readers and writers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use specexit_core::trace::TraceRecord;

/// Parsed trace file plus the lines that did not parse.
#[derive(Debug, Default)]
pub struct TraceSet {
    pub records: Vec<TraceRecord>,
    /// `(line number, id if recoverable, reason)`.
    pub skipped: Vec<(usize, Option<String>, String)>,
}

impl TraceSet {
    pub fn total(&self) -> usize {
        self.records.len() + self.skipped.len()
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / self.total() as f64
        }
    }
}

/// Reads trace JSONL, skipping blank lines and logging malformed ones.
pub fn read_traces(path: &Path) -> Result<TraceSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut set = TraceSet::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line) {
            Ok(r) => set.records.push(r),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|x| x.as_str()).map(str::to_owned));
                tracing::warn!(
                    line = i + 1,
                    id = id.as_deref().unwrap_or("?"),
                    "skipping malformed trace: {e}"
                );
                set.skipped.push((i + 1, id, e.to_string()));
            }
        }
    }
    Ok(set)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().map(|row| Ok(row?)).collect()
}
