//! Line-delimited JSON trace of per-sample head energies.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub run_id: String,
    pub step: u64,
    pub batch_id: u64,
    pub layer: u32,
    pub head: u32,
    pub sample: u32,
    pub energy: f64,
    pub batch_csi_m: Option<f64>,
}

pub type RecordKey = (String, u64, u64, u32, u32, u32);

impl TraceRecord {
    pub fn key(&self) -> RecordKey {
        (self.run_id.clone(), self.step, self.batch_id, self.layer, self.head, self.sample)
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.energy.is_finite() && self.energy >= 0.0) {
            return Err(format!("energy must be finite and nonnegative, got {}", self.energy));
        }
        if let Some(c) = self.batch_csi_m {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("batch_csi_m must lie in [0, 1], got {c}"));
            }
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

pub fn write_trace(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

fn parse_line(line: &str) -> Result<TraceRecord, String> {
    if line.ends_with('\r') {
        return Err("CRLF line ending".into());
    }
    let rec: TraceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.validate()?;
    Ok(rec)
}

/// Parses a whole trace. Lines are parsed in parallel; errors report the
/// first bad line (1-based) regardless of scheduling.
pub fn parse_trace(text: &str) -> CliResult<Vec<TraceRecord>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    let lines: Vec<&str> = body.split('\n').collect();
    let parsed: Vec<Result<TraceRecord, String>> = lines.par_iter().map(|l| parse_line(l)).collect();
    let mut out = Vec::with_capacity(parsed.len());
    let mut seen: HashMap<RecordKey, usize> = HashMap::with_capacity(parsed.len());
    for (i, p) in parsed.into_iter().enumerate() {
        let rec = p.map_err(|e| CliError::usage(format!("trace line {}: {e}", i + 1)))?;
        if let Some(first) = seen.insert(rec.key(), i + 1) {
            return Err(CliError::usage(format!(
                "trace line {}: duplicate record (run {}, step {}, batch {}, layer {}, head {}, sample {}) first seen on line {first}",
                i + 1,
                rec.run_id,
                rec.step,
                rec.batch_id,
                rec.layer,
                rec.head,
                rec.sample
            )));
        }
        out.push(rec);
    }
    Ok(out)
}
