//! Line-delimited loss logs, generation records, metric and matching files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use damper_core::metrics::MetricReport;
use damper_core::report_gen::LossBreakdown;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{DamperError, Result};

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const MATCHING_FILE: &str = "matching.json";

/// Label written next to the METEOR score: only the exact-match stage runs.
pub const METEOR_VARIANT: &str = "simplified (exact-match stage only)";

/// `{"step": n, "<term>": value, ...}` in breakdown order.
pub fn loss_line(step: usize, b: &LossBreakdown) -> String {
    let mut m = Map::new();
    m.insert("step".into(), json!(step));
    for (k, v) in b.entries() {
        m.insert(k.into(), json!(v));
    }
    Value::Object(m).to_string()
}

/// Parsed loss log: one `(step, term → value)` per line.
pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, BTreeMap<String, f64>)>> {
    read_lines(path, |v: Map<String, Value>| {
        let step = v.get("step").and_then(Value::as_u64).ok_or("missing step")? as usize;
        let terms = v
            .iter()
            .filter(|(k, _)| k.as_str() != "step")
            .map(|(k, x)| x.as_f64().map(|f| (k.clone(), f)).ok_or("non-numeric term"))
            .collect::<std::result::Result<_, _>>()?;
        Ok((step, terms))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub study_id: String,
    pub generated_mesh: Vec<String>,
    pub generated_report: String,
}

pub fn write_generations(path: &Path, gens: &[Generation]) -> Result<()> {
    let mut out = Vec::new();
    for g in gens {
        serde_json::to_writer(&mut out, g).expect("plain struct serializes");
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn read_generations(path: &Path) -> Result<Vec<Generation>> {
    read_lines(path, |g: Generation| Ok(g))
}

/// Fixed top-level keys, the METEOR label, then the per-study breakdown.
pub fn metrics_json(report: &MetricReport) -> Value {
    let mut m = Map::new();
    for (k, v) in report.entries() {
        m.insert(k.into(), json!(v));
    }
    m.insert("meteor_variant".into(), json!(METEOR_VARIANT));
    let per_study: Vec<Value> = report
        .per_study
        .iter()
        .map(|s| {
            json!({
                "study_id": s.study_id,
                "bleu_4": s.bleu_4,
                "meteor": s.meteor,
                "rouge_l": s.rouge_l,
                "ce_tp": s.labels.tp,
                "ce_fp": s.labels.fp,
                "ce_fn": s.labels.fn_,
            })
        })
        .collect();
    m.insert("per_study".into(), Value::Array(per_study));
    Value::Object(m)
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| DamperError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DamperError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| DamperError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DamperError::io(path, e))
}

fn read_lines<T: serde::de::DeserializeOwned, U>(
    path: &Path,
    mut convert: impl FnMut(T) -> std::result::Result<U, &'static str>,
) -> Result<Vec<U>> {
    let file = fs::File::open(path).map_err(|e| DamperError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DamperError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| DamperError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let raw: T = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(convert(raw).map_err(|e| err(e.into()))?);
    }
    Ok(out)
}
