use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Output of one experiment: the resolved configuration, one record per
/// cell, and summaries computed from those records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_echo: Value,
    pub seeds: Vec<u64>,
    pub rows: Vec<Map<String, Value>>,
    pub derived: Map<String, Value>,
}

impl ExperimentReport {
    pub fn new(name: &str, config_echo: Value, seeds: Vec<u64>) -> Self {
        Self {
            name: name.to_owned(),
            config_echo,
            seeds,
            rows: Vec::new(),
            derived: Map::new(),
        }
    }

    pub fn push_row(&mut self, row: Map<String, Value>) {
        self.rows.push(row);
    }

    pub fn derive(&mut self, key: &str, value: impl Into<Value>) {
        self.derived.insert(key.to_owned(), value.into());
    }

    /// Numeric summary, or `None` when absent or null.
    pub fn derived_f64(&self, key: &str) -> Option<f64> {
        self.derived.get(key).and_then(Value::as_f64)
    }

    /// Numeric column of the row table; null cells become NaN.
    pub fn column(&self, key: &str) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN))
            .collect()
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Row table with the union of row keys as columns, in first-seen
    /// order. Missing and null cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ReportError> {
        let mut columns: Vec<&str> = Vec::new();
        for row in &self.rows {
            for key in row.keys() {
                if !columns.contains(&key.as_str()) {
                    columns.push(key);
                }
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&columns)?;
        for row in &self.rows {
            w.write_record(columns.iter().map(|c| cell(row.get(*c))))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

/// JSON number, with non-finite values as null.
pub(crate) fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else {
        Value::Null
    }
}

/// Builds a row map from `(key, value)` pairs.
macro_rules! row {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut m = serde_json::Map::new();
        $( m.insert(String::from($k), serde_json::Value::from($v)); )*
        m
    }};
}
pub(crate) use row;
