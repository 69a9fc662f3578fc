use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub seed: u64,
    pub metric: String,
    pub step: u64,
    pub value: f64,
}

/// Append-only table of scalar metrics. Steps never decrease within a
/// `(run, seed, metric)` series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    rows: Vec<MetricRow>,
    last: HashMap<(String, u64, String), u64>,
}

impl MetricsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, run: &str, seed: u64, metric: &str, step: u64, value: f64) -> Result<()> {
        self.push_row(MetricRow {
            run: run.to_string(),
            seed,
            metric: metric.to_string(),
            step,
            value,
        })
    }

    fn push_row(&mut self, row: MetricRow) -> Result<()> {
        let key = (row.run.clone(), row.seed, row.metric.clone());
        if let Some(&prev) = self.last.get(&key) {
            if row.step < prev {
                return Err(Error::InvalidInput(format!(
                    "metric {} of run {} (seed {}) went back from step {prev} to {}",
                    row.metric, row.run, row.seed, row.step
                )));
            }
        }
        self.last.insert(key, row.step);
        self.rows.push(row);
        Ok(())
    }

    /// Append every row of `other`, keeping the monotonicity check.
    pub fn extend(&mut self, other: &MetricsTable) -> Result<()> {
        for r in &other.rows {
            self.push_row(r.clone())?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows of one series in insertion order.
    pub fn series(&self, run: &str, seed: u64, metric: &str) -> Vec<&MetricRow> {
        self.rows
            .iter()
            .filter(|r| r.run == run && r.seed == seed && r.metric == metric)
            .collect()
    }

    /// Last value of a series.
    pub fn last_value(&self, run: &str, seed: u64, metric: &str) -> Option<f64> {
        self.series(run, seed, metric).last().map(|r| r.value)
    }

    /// Distinct run ids in first-seen order.
    pub fn runs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.run) {
                out.push(r.run.clone());
            }
        }
        out
    }

    /// Distinct seeds recorded for `run`, in first-seen order.
    pub fn seeds(&self, run: &str) -> Vec<u64> {
        let mut out = Vec::new();
        for r in self.rows.iter().filter(|r| r.run == run) {
            if !out.contains(&r.seed) {
                out.push(r.seed);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut table = Self::new();
        for row in reader.deserialize() {
            table.push_row(row?)?;
        }
        Ok(table)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}
