use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Version string written into every JSON report.
pub const ARTIFACT_VERSION: &str = concat!("biaspath ", env!("CARGO_PKG_VERSION"));

/// Rows plus aggregates of one experiment run.
///
/// Rows go to CSV; the JSON file holds everything else. Both are
/// byte-stable: columns keep insertion order, maps are sorted and floats use
/// the shortest round-trip formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub config: Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub aggregates: BTreeMap<String, f64>,
    /// Structured outputs that are not per-sample rows.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64, config: Value, columns: &[&str]) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            config,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            aggregates: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the column list");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of one column across all rows.
    pub fn values<'a>(&'a self, name: &str) -> impl Iterator<Item = &'a Value> + 'a {
        let idx = self.column(name);
        self.rows.iter().filter_map(move |r| idx.map(|i| &r[i]))
    }

    pub fn aggregate(&self, key: &str) -> Result<f64> {
        self.aggregates
            .get(key)
            .copied()
            .ok_or_else(|| Error::Data(format!("report {} has no aggregate {key:?}", self.experiment)))
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let path = PathBuf::from(format!("{}.csv", self.experiment));
        let wrap = |source| Error::Csv {
            path: path.clone(),
            source,
        };
        w.write_record(&self.columns).map_err(wrap)?;
        for row in &self.rows {
            w.write_record(row.iter().map(cell)).map_err(wrap)?;
        }
        w.into_inner()
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))
    }

    /// Aggregates, config and seed; the rows live in the CSV.
    pub fn to_json(&self) -> Result<String> {
        let summary = serde_json::json!({
            "experiment": self.experiment,
            "artifact_version": ARTIFACT_VERSION,
            "seed": self.seed,
            "config": self.config,
            "aggregates": self.aggregates,
            "extra": self.extra,
            "row_count": self.rows.len(),
        });
        let mut s = serde_json::to_string_pretty(&summary).map_err(|e| Error::json("report", e))?;
        s.push('\n');
        Ok(s)
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Writes `<experiment>.csv` and `<experiment>.json` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{}.csv", report.experiment));
    let json_path = dir.join(format!("{}.json", report.experiment));
    std::fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

/// Fraction of `true` among the non-null booleans; `None` when there are none.
pub(crate) fn fraction<'a>(values: impl Iterator<Item = &'a Value>) -> Option<f64> {
    let (hits, n) = values
        .filter_map(Value::as_bool)
        .fold((0usize, 0usize), |(h, n), b| (h + b as usize, n + 1));
    (n > 0).then(|| hits as f64 / n as f64)
}
