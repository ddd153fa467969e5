//! Line-delimited JSON metric log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::influence::InfluenceSnapshot;

use super::RunError;

pub type Named = BTreeMap<String, f64>;

pub fn named(names: &[String], values: &[f64]) -> Named {
    names.iter().cloned().zip(values.iter().copied()).collect()
}

/// One record per logging period. Loss-like fields are means over the period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub critic_loss: Named,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cagrad_weight: Option<Named>,
    /// Scheduled environmental component weights at `step`.
    pub component_weight: Named,
    pub alpha: f64,
    pub alpha_loss: f64,
    pub policy_loss: f64,
    pub critic_grad_norm: f64,
    pub policy_grad_norm: f64,
    pub mean_log_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_return: Option<Named>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_composite: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_success_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence: Option<Named>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence_degenerate: Option<usize>,
}

pub struct MetricWriter {
    out: BufWriter<File>,
}

impl MetricWriter {
    pub fn create(path: &Path) -> Result<Self, RunError> {
        let file = File::create(path).map_err(|e| RunError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    /// Appends one JSON object line and flushes.
    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), RunError> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, RunError> {
    let file = File::open(path).map_err(|e| RunError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            RunError::Config(format!("{}:{}: {e}", path.display(), k + 1))
        })?);
    }
    Ok(out)
}

/// Influence snapshots in log order, with heads arranged as `head_names`.
pub fn influence_snapshots(records: &[MetricRecord], head_names: &[String]) -> Vec<InfluenceSnapshot> {
    records
        .iter()
        .filter_map(|r| {
            r.influence.as_ref().map(|inf| InfluenceSnapshot {
                step: r.step,
                mean_fractional: head_names.iter().map(|n| inf.get(n).copied().unwrap_or(0.0)).collect(),
            })
        })
        .collect()
}
