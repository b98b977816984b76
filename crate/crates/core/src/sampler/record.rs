use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ConvergedEarlyStop,
    SelectedByRepeat,
    FallbackAutoregressive,
    FailedRestartExhausted,
}

impl Termination {
    /// Output produced by the constrained sampler itself.
    pub fn is_constrained(self) -> bool {
        matches!(self, Termination::ConvergedEarlyStop | Termination::SelectedByRepeat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintOutcome {
    pub name: String,
    /// `null` when the constraint cannot be evaluated on the output (for
    /// example a phrase longer than a fallback sample).
    pub f_final: Option<f64>,
    pub epsilon: f64,
    pub satisfied: bool,
}

/// One iteration of one attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub attempt: usize,
    pub t: usize,
    pub energy: f64,
    pub nll: f64,
    pub f: Vec<f64>,
    pub lambda: Vec<f64>,
    pub beta: f64,
    pub eta: f64,
    pub ids_hash: String,
    /// Discrete readout of the state at this iteration.
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub version: u32,
    pub prompt: String,
    pub output_ids: Vec<usize>,
    pub output_text: String,
    pub termination: Termination,
    pub constraints: Vec<ConstraintOutcome>,
    pub nll: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub trace: Vec<TraceEntry>,
    /// Peak bytes held by the optimizer state (vectors, gradient, noise).
    #[serde(skip)]
    pub peak_state_bytes: usize,
    /// Peak bytes held by the autodiff graph in one iteration.
    #[serde(skip)]
    pub peak_graph_bytes: usize,
}

impl SampleRecord {
    pub fn all_satisfied(&self) -> bool {
        self.constraints.iter().all(|c| c.satisfied)
    }

    pub fn per_token_nll(&self) -> f64 {
        self.nll / self.output_ids.len().max(1) as f64
    }
}

/// Short content hash of a token-id sequence.
pub fn ids_hash(ids: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in ids {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[SampleRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses JSONL records; errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(RECORD_VERSION as u64) {
            return Err(Error::invalid(format!(
                "line {}: record version {version:?} is not supported (expected {RECORD_VERSION})",
                i + 1
            )));
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Writes the traces of `records` as JSONL (one entry per line, tagged
/// with the record index), gzip-compressed when `gzip` is set.
pub fn write_trace<W: Write>(w: W, records: &[SampleRecord], gzip: bool) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        record: usize,
        #[serde(flatten)]
        entry: &'a TraceEntry,
    }
    let mut sink: Box<dyn Write> = if gzip {
        Box::new(flate2::write::GzEncoder::new(w, flate2::Compression::default()))
    } else {
        Box::new(w)
    };
    for (record, r) in records.iter().enumerate() {
        for entry in &r.trace {
            serde_json::to_writer(&mut sink, &Line { record, entry })?;
            sink.write_all(b"\n")?;
        }
    }
    sink.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> SampleRecord {
        SampleRecord {
            version: RECORD_VERSION,
            prompt: "the movie".into(),
            output_ids: vec![4, 5],
            output_text: "was good".into(),
            termination: Termination::SelectedByRepeat,
            constraints: vec![ConstraintOutcome {
                name: "k".into(),
                f_final: Some(0.25),
                epsilon: 0.5,
                satisfied: true,
            }],
            nll: 1.5,
            iterations: 250,
            trace: vec![],
            peak_state_bytes: 0,
            peak_graph_bytes: 0,
        }
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[record(), record()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["constraints", "iterations", "nll", "output_ids", "output_text", "prompt", "termination", "version"]
        );
        assert_eq!(first["termination"], "selected-by-repeat");
        assert_eq!(read_jsonl(&buf[..]).unwrap(), vec![record(), record()]);
    }

    #[test]
    fn bad_lines_are_located() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[record()]).unwrap();
        buf.extend_from_slice(b"{not json\n");
        let err = read_jsonl(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let old = serde_json::to_string(&record()).unwrap().replace("\"version\":1", "\"version\":9");
        let err = read_jsonl(old.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("version") && err.contains('9'), "{err}");
    }

    #[test]
    fn gzip_trace_decompresses() {
        use std::io::Read;
        let mut r = record();
        r.trace.push(TraceEntry {
            attempt: 0,
            t: 0,
            energy: 1.0,
            nll: 1.0,
            f: vec![0.1],
            lambda: vec![0.0],
            beta: 5.0,
            eta: 0.1,
            ids_hash: ids_hash(&[4, 5]),
            ids: vec![4, 5],
        });
        let mut buf = Vec::new();
        write_trace(&mut buf, &[r], true).unwrap();
        let mut text = String::new();
        flate2::read::GzDecoder::new(&buf[..]).read_to_string(&mut text).unwrap();
        assert!(text.contains("\"record\":0") && text.contains("\"beta\":5.0"));
    }
}
