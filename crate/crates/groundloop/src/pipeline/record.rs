//! Append-only per-generation records: one JSON object per line, replayable.
//!
//! `gate_p_hall` is the detector score of the adapter-free first pass — the
//! number the gate compares against tau — while `p_hall`/`flag` describe the
//! output actually returned (the gated second pass when the gate fired).
//! Keeping both makes gating decisions replayable from the log while letting
//! the hallucination rate track the delivered output.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub doc_id: String,
    pub rank: usize,
    pub bm25: f64,
    pub bm25_norm: f64,
    pub dense: f64,
    pub hybrid: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rrf: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossNumbers {
    pub ce: f64,
    pub kl: f64,
    pub contrast: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub raw_query: String,
    pub rewritten: String,
    pub template_id: String,
    pub retrieval: Vec<RetrievalEntry>,
    pub generated_text: String,
    pub gen_tokens: usize,
    /// Detector score of the frozen first pass; drives the gate.
    pub gate_p_hall: f64,
    pub adapter_active: bool,
    /// Detector score of the returned output.
    pub p_hall: f64,
    pub flag: bool,
    pub tau: f64,
    pub kl_drift: f64,
    pub jsd: f64,
    pub drift_cosine: f64,
    pub attention_entropy: f64,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossNumbers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub ts_ms: u64,
    pub config_fingerprint: String,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Appends records to a JSONL file.
pub struct RecordWriter {
    path: PathBuf,
}

impl RecordWriter {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RecordWriter { path: path.into() }
    }

    pub fn append(&self, record: &RunRecord) -> Result<()> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        let line = serde_json::to_string(record)?;
        writeln!(file, "{line}").map_err(|e| Error::io(self.path.display().to_string(), e))
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let writer = RecordWriter::new(path);
    for r in records {
        writer.append(r)?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Record equality ignoring wall-clock timestamps.
pub fn records_equal_modulo_timestamps(a: &[RunRecord], b: &[RunRecord]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).all(|(x, y)| {
        let mut x = x.clone();
        let mut y = y.clone();
        x.ts_ms = 0;
        y.ts_ms = 0;
        x == y
    })
}
