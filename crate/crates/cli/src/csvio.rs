//! CSV files written and read by the commands.

use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use forgetkit::engine::TaskResult;
use forgetkit::metrics::{MetricRecord, RecoveryCurve};
use forgetkit::model::PretrainLog;
use serde::{Deserialize, Serialize};

use crate::UserError;

pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: [&str; 12] = [
    "schema_version",
    "task_id",
    "method",
    "seed",
    "acc_r",
    "acc_f",
    "acc_o",
    "acc_m",
    "h_mean",
    "zero_group_ratio",
    "tunable_ratio",
    "wall_ms",
];

/// One line of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub task_id: u32,
    pub method: String,
    pub seed: u64,
    pub acc_r: f64,
    pub acc_f: f64,
    pub acc_o: Option<f64>,
    pub acc_m: Option<f64>,
    pub h_mean: f64,
    pub zero_group_ratio: f64,
    pub tunable_ratio: f64,
    pub wall_ms: Option<u64>,
}

impl From<&MetricRecord> for MetricsRow {
    fn from(r: &MetricRecord) -> Self {
        MetricsRow {
            schema_version: SCHEMA_VERSION,
            task_id: r.task_id,
            method: r.method.clone(),
            seed: r.seed,
            acc_r: r.acc_r,
            acc_f: r.acc_f,
            acc_o: r.acc_o,
            acc_m: r.acc_m,
            h_mean: r.h_mean,
            zero_group_ratio: r.zero_group_ratio,
            tunable_ratio: r.tunable_ratio,
            wall_ms: r.wall_ms,
        }
    }
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = create(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and checks a metrics.csv; errors name the file and row.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| UserError(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(UserError(format!("{}: unexpected header {:?}", path.display(), header.join(","))).into());
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<MetricsRow>().enumerate() {
        let row = rec.map_err(|e| UserError(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if row.schema_version != SCHEMA_VERSION {
            return Err(UserError(format!(
                "{} row {}: schema version {} (expected {SCHEMA_VERSION})",
                path.display(),
                i + 1,
                row.schema_version
            ))
            .into());
        }
        let pct = [Some(row.acc_r), Some(row.acc_f), row.acc_o, row.acc_m, Some(row.h_mean)];
        let ratios = [row.zero_group_ratio, row.tunable_ratio];
        if pct.iter().flatten().any(|v| !(0.0..=100.0).contains(v)) || ratios.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(UserError(format!("{} row {}: value out of range", path.display(), i + 1)).into());
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Per-iteration loss breakdown for every `(seed, task results)` run.
pub fn write_loss_log(path: &Path, runs: &[(u64, Vec<TaskResult>)]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record([
        "seed",
        "task_id",
        "iteration",
        "retain",
        "forget",
        "pro_retain",
        "pro_forget",
        "structure",
        "total",
    ])?;
    for (seed, results) in runs {
        for r in results {
            for it in &r.log {
                let l = it.loss;
                w.write_record([
                    seed.to_string(),
                    r.task_id.to_string(),
                    it.iteration.to_string(),
                    l.retain.to_string(),
                    l.forget.to_string(),
                    l.pro_retain.to_string(),
                    l.pro_forget.to_string(),
                    l.structure.to_string(),
                    l.total.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pretrain_log(path: &Path, log: &PretrainLog) -> Result<()> {
    let mut w = create(path)?;
    for e in &log.epochs {
        w.serialize(e)?;
    }
    if log.epochs.is_empty() {
        w.write_record(["epoch", "loss", "train_accuracy"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve(path: &Path, curve: &RecoveryCurve) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["epoch", "forgotten", "retained"])?;
    for (e, (f, r)) in curve.forgotten.iter().zip(&curve.retained).enumerate() {
        w.write_record([e.to_string(), f.to_string(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<RecoveryCurve> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut curve = RecoveryCurve::default();
    for rec in r.deserialize::<(usize, f64, f64)>() {
        let (_, f, rt) = rec?;
        curve.forgotten.push(f);
        curve.retained.push(rt);
    }
    Ok(curve)
}
