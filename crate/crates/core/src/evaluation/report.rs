use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{confidence_interval, ConfidenceInterval};
use crate::error::{Error, Result};

/// One measured quantity, as written to report files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub protocol: String,
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparator: Option<String>,
}

impl MetricReport {
    /// A value without an interval (`ci_low = ci_high = value`).
    pub fn point(protocol: &str, dataset: &str, metric: &str, value: f64, n: usize) -> Self {
        Self {
            protocol: protocol.into(),
            dataset: dataset.into(),
            metric: metric.into(),
            value,
            ci_low: value,
            ci_high: value,
            n,
            seed: None,
            n_per_class: None,
            p_value: None,
            comparator: None,
        }
    }

    /// The mean of `values` with its 1.96-standard-error interval.
    pub fn from_values(protocol: &str, dataset: &str, metric: &str, values: &[f64]) -> Result<Self> {
        let ConfidenceInterval { mean, low, high, .. } = confidence_interval(values)?;
        Ok(Self {
            ci_low: low,
            ci_high: high,
            ..Self::point(protocol, dataset, metric, mean, values.len())
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_shots(mut self, n: usize) -> Self {
        self.n_per_class = Some(n);
        self
    }

    pub fn with_p_value(mut self, p: f64, comparator: &str) -> Self {
        self.p_value = Some(p);
        self.comparator = Some(comparator.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ci_low <= self.value && self.value <= self.ci_high) {
            return Err(Error::Validation(format!(
                "{}: value {} outside [{}, {}]",
                self.metric, self.value, self.ci_low, self.ci_high
            )));
        }
        if let Some(p) = self.p_value {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{}: p-value {p} outside [0, 1]", self.metric)));
            }
        }
        Ok(())
    }
}

/// Appends reports as JSON lines.
pub fn append_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        r.validate()?;
        writeln!(f, "{}", serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?)?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricReport = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}
