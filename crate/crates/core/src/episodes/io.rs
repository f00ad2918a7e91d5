//! TSV text and JSONL vector ingestion.
//!
//! TSV: one `label<TAB>text` record per line, UTF-8, no header.
//! JSONL: one `{"label": "...", "vector": [...]}` object per line; blank lines are skipped.
//! Labels map to dense class ids in order of first appearance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Item, Payload};
use crate::error::{Error, Result};

#[derive(Default)]
struct Labels {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Labels {
    fn id(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_tsv(BufReader::new(File::open(path)?), path)
}

/// Parses TSV records from `reader`; `path` is used in error messages only.
pub fn parse_tsv(reader: impl BufRead, path: &Path) -> Result<Dataset> {
    let mut labels = Labels::default();
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(path, lineno, "expected `label<TAB>text`"))?;
        if label.is_empty() {
            return Err(parse_error(path, lineno, "empty label"));
        }
        if text.trim().is_empty() {
            return Err(parse_error(path, lineno, "empty text"));
        }
        items.push(Item {
            label: labels.id(label),
            payload: Payload::Text(text.to_string()),
        });
    }
    if items.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Dataset::new(labels.names, items)
}

pub fn save_tsv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in dataset.items() {
        let Payload::Text(text) = &item.payload else {
            return Err(Error::Data("TSV output needs a text dataset".into()));
        };
        let label = &dataset.class_names()[item.label];
        if [label.as_str(), text.as_str()]
            .iter()
            .any(|s| s.contains(['\t', '\n', '\r']))
        {
            return Err(Error::Data(format!(
                "record `{label}` contains a tab or newline and cannot be written as TSV"
            )));
        }
        writeln!(out, "{label}\t{text}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    label: String,
    vector: Vec<f64>,
}

/// Loads a JSONL vector file, logging how many blank lines were skipped.
pub fn load_jsonl_vectors(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let (dataset, skipped) = parse_jsonl_vectors(BufReader::new(File::open(path)?), path)?;
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} blank line(s)", path.display());
    }
    Ok(dataset)
}

/// Parses JSONL vector records; returns the dataset and the number of blank lines skipped.
pub fn parse_jsonl_vectors(reader: impl BufRead, path: &Path) -> Result<(Dataset, usize)> {
    let mut labels = Labels::default();
    let mut items = Vec::new();
    let mut skipped = 0;
    let mut dim = None;
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            skipped += 1;
            continue;
        }
        let record: VectorRecord =
            serde_json::from_str(&line).map_err(|e| parse_error(path, lineno, e.to_string()))?;
        match dim {
            None => dim = Some(record.vector.len()),
            Some(d) if d != record.vector.len() => {
                return Err(parse_error(
                    path,
                    lineno,
                    format!("vector has dimension {}, expected {d}", record.vector.len()),
                ))
            }
            _ => {}
        }
        if record.vector.is_empty() {
            return Err(parse_error(path, lineno, "empty vector"));
        }
        items.push(Item {
            label: labels.id(&record.label),
            payload: Payload::Vector(record.vector),
        });
    }
    if items.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok((Dataset::new(labels.names, items)?, skipped))
}

pub fn save_jsonl_vectors(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in dataset.items() {
        let Payload::Vector(v) = &item.payload else {
            return Err(Error::Data("JSONL output needs a vector dataset".into()));
        };
        let record = VectorRecord {
            label: dataset.class_names()[item.label].clone(),
            vector: v.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
