//! Newline-delimited JSON datasets: a header line followed by one sample per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::SyntheticSample;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "sts-dataset";
pub const DATASET_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u64,
    pub count: usize,
    /// Free-form provenance (seeds, configs).
    #[serde(default)]
    pub meta: Value,
}

impl DatasetHeader {
    pub fn new(count: usize, meta: Value) -> Self {
        DatasetHeader { format: DATASET_FORMAT.into(), version: DATASET_VERSION, count, meta }
    }
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[SyntheticSample], meta: Value) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &DatasetHeader::new(samples.len(), meta))?;
    w.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<SyntheticSample>)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::MalformedRecord { line: 1, message: "missing header".into() }),
    };
    let raw: Value = serde_json::from_str(&header_line)
        .map_err(|e| Error::MalformedRecord { line: 1, message: e.to_string() })?;
    if raw.get("format").and_then(Value::as_str) != Some(DATASET_FORMAT) {
        return Err(Error::MalformedRecord { line: 1, message: format!("not an {DATASET_FORMAT} file") });
    }
    match raw.get("version").and_then(Value::as_u64) {
        Some(DATASET_VERSION) => {}
        Some(found) => return Err(Error::Version { found, expected: DATASET_VERSION }),
        None => return Err(Error::MalformedRecord { line: 1, message: "missing version".into() }),
    }
    let header: DatasetHeader =
        serde_json::from_value(raw).map_err(|e| Error::MalformedRecord { line: 1, message: e.to_string() })?;

    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SyntheticSample = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedRecord { line: i + 1, message: e.to_string() })?;
        samples.push(sample);
    }
    if samples.len() != header.count {
        return Err(Error::MalformedRecord {
            line: samples.len() + 2,
            message: format!("header announces {} samples, found {}", header.count, samples.len()),
        });
    }
    Ok((header, samples))
}
