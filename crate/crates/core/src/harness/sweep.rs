//! Learning-rate sweep across pooling activations.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bilinear::PoolingActivation;
use crate::corpus::Dataset;
use crate::error::{Error, Result};

use super::config::Config;
use super::train::{load_data, train_on};

pub const SWEEP_ACTIVATIONS: [PoolingActivation; 2] = [PoolingActivation::Relu, PoolingActivation::Elu];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One sweep run. Metrics are those of the best epoch; empty when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub activation: PoolingActivation,
    pub status: RunStatus,
    pub slot_f1: Option<f64>,
    pub intent_acc: Option<f64>,
    pub overall_acc: Option<f64>,
    pub error: Option<String>,
}

/// Parses a comma-separated list such as `1e-4,1e-3`.
pub fn parse_lrs(text: &str) -> Result<Vec<f64>> {
    let lrs = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| Error::Config(format!("`{s}` is not a positive learning rate")))
        })
        .collect::<Result<Vec<_>>>()?;
    if lrs.is_empty() {
        return Err(Error::Config("learning-rate list is empty".into()));
    }
    Ok(lrs)
}

/// Trains one model per learning rate and activation. A failing run becomes a
/// `failed` row and the sweep moves on.
pub fn lr_sweep(config: &Config, lrs: &[f64]) -> Result<Vec<SweepRow>> {
    if lrs.is_empty() {
        return Err(Error::Config("learning-rate list is empty".into()));
    }
    let (train_set, dev_set) = load_data(config)?;
    let mut rows = Vec::with_capacity(lrs.len() * SWEEP_ACTIVATIONS.len());
    for &lr in lrs {
        for activation in SWEEP_ACTIVATIONS {
            let run = Config {
                lr,
                activation,
                checkpoint: None,
                metrics_log: None,
                ..config.clone()
            };
            rows.push(run_one(&run, &train_set, &dev_set));
        }
    }
    Ok(rows)
}

fn run_one(config: &Config, train_set: &Dataset, dev_set: &Dataset) -> SweepRow {
    let outcome = catch_unwind(AssertUnwindSafe(|| train_on(config, train_set, dev_set)));
    let failed = |msg: String| SweepRow {
        lr: config.lr,
        activation: config.activation,
        status: RunStatus::Failed,
        slot_f1: None,
        intent_acc: None,
        overall_acc: None,
        error: Some(msg),
    };
    match outcome {
        Ok(Ok(out)) => {
            let r = out.best_report();
            SweepRow {
                lr: config.lr,
                activation: config.activation,
                status: RunStatus::Ok,
                slot_f1: Some(r.slot_f1),
                intent_acc: Some(r.intent_acc),
                overall_acc: Some(r.overall_acc),
                error: None,
            }
        }
        Ok(Err(e)) => failed(e.to_string()),
        Err(panic) => failed(
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "run panicked".into()),
        ),
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
