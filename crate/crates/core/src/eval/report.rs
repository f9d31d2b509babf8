use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EvalError;

/// Key of the trailing summary line in a report file.
pub const SUMMARY_KEY: &str = "summary";

/// Relative slack allowed when re-deriving an aggregate from its rows.
const RECOUNT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub n: usize,
}

/// Outcome fields for one instance. Booleans count as 0/1 when aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub instance_id: String,
    #[serde(flatten)]
    pub fields: BTreeMap<String, Value>,
}

impl EvalRow {
    pub fn new(instance_id: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.into(),
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: &str, value: impl Into<Value>) -> Self {
        self.fields.insert(field.to_string(), value.into());
        self
    }

    /// Numeric reading of a field, if present and numeric or boolean.
    pub fn number(&self, field: &str) -> Option<f64> {
        match self.fields.get(field)? {
            Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Value::Number(n) => n.as_f64(),
            _ => None,
        }
    }
}

/// Per-instance rows and the metrics aggregated from them. Every metric
/// is the mean of the same-named row field over the rows that carry it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<Metric>,
    pub rows: Vec<EvalRow>,
}

fn mean_of(rows: &[EvalRow], field: &str) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for value in rows.iter().filter_map(|r| r.number(field)) {
        sum += value;
        n += 1;
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: Vec<Metric>,
}

impl EvalReport {
    /// Builds a report whose metrics are computed from `rows`, which are
    /// sorted by instance id first.
    pub fn from_rows(mut rows: Vec<EvalRow>, metric_fields: &[&str]) -> Self {
        rows.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let metrics = metric_fields
            .iter()
            .map(|field| {
                let (value, n) = mean_of(&rows, field);
                Metric {
                    name: field.to_string(),
                    value,
                    n,
                }
            })
            .collect();
        Self { metrics, rows }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    /// Recomputes every metric from the rows and compares.
    pub fn verify(&self) -> Result<(), EvalError> {
        for metric in &self.metrics {
            let (value, n) = mean_of(&self.rows, &metric.name);
            let slack = RECOUNT_TOLERANCE * value.abs().max(1.0);
            if n != metric.n || (value - metric.value).abs() > slack {
                return Err(EvalError::Inconsistent {
                    metric: metric.name.clone(),
                    reported: metric.value,
                    recomputed: value,
                });
            }
        }
        Ok(())
    }

    /// Rows one per line followed by a `{"summary": [...]}` line. The
    /// report is verified first.
    pub fn to_jsonl(&self) -> Result<String, EvalError> {
        self.verify()?;
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        let summary = SummaryLine {
            summary: self.metrics.clone(),
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        Ok(out)
    }

    /// Reads the format written by [`EvalReport::to_jsonl`], skipping an
    /// optional header line, and verifies it.
    pub fn read_jsonl<R: BufRead>(source: R) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        let mut metrics = None;
        for (i, line) in source.lines().enumerate() {
            let line = line.map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value =
                serde_json::from_str(&line).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
            if value.get(crate::jsonl::HEADER_KEY).is_some() {
                continue;
            }
            if value.get(SUMMARY_KEY).is_some() {
                let s: SummaryLine = serde_json::from_value(value)
                    .map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
                metrics = Some(s.summary);
                continue;
            }
            rows.push(
                serde_json::from_value(value).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?,
            );
        }
        let metrics = metrics.ok_or(EvalError::Parse {
            line: 0,
            message: "no summary line".into(),
        })?;
        let report = Self { metrics, rows };
        report.verify()?;
        Ok(report)
    }

    /// Plain-text table of the metrics.
    pub fn to_table(&self) -> String {
        let width = self.metrics.iter().map(|m| m.name.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>10}  {:>8}\n", "metric", "value", "n");
        for m in &self.metrics {
            let _ = writeln!(out, "{:<width$}  {:>10.4}  {:>8}", m.name, m.value, m.n);
        }
        out
    }
}
