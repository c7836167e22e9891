//! Line-JSON (JSONL) readers and writers for corpora, templates and
//! datasets. Malformed lines are reported with their line numbers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, IoContextExt, Result};

/// Reads one record per line. On malformed lines the error lists every bad
/// line number with its parse failure.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).io_context(format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    let mut bad_lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.io_context(format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(rec) => out.push(rec),
            Err(e) => bad_lines.push(format!("line {}: {e}", i + 1)),
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: {} malformed line(s)\n  {}",
            path.display(),
            bad_lines.len(),
            bad_lines.join("\n  ")
        )));
    }
    Ok(out)
}

/// Writes one record per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).io_context(format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one JSON record to a log file.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, record: &T) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .io_context(format!("appending to {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, record)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
