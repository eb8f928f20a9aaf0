//! Per-epoch metrics and their CSV form.
//!
//! Columns, in order, with `<t>` ranging over the configured tasks:
//!
//! ```text
//! epoch, train_loss_<t>..., val_loss_<t>..., val_acc_<t>..., combined_loss, weight_<t>...
//! ```
//!
//! Wall-clock time goes to a separate file so that the metrics file stays
//! reproducible byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::task::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub tasks: Vec<Task>,
    /// Mean floored training loss per task over the epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Mean combined training loss over the epoch.
    pub combined_loss: f64,
    /// Effective weight `d total / d L_i` of each task.
    pub weights: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl EpochMetrics {
    fn index(&self, task: Task) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }

    pub fn val_accuracy_of(&self, task: Task) -> Option<f64> {
        self.index(task).map(|i| self.val_accuracy[i])
    }

    pub fn val_loss_of(&self, task: Task) -> Option<f64> {
        self.index(task).map(|i| self.val_loss[i])
    }
}

fn header(tasks: &[Task]) -> Vec<String> {
    let mut h = vec!["epoch".to_string()];
    for prefix in ["train_loss", "val_loss", "val_acc"] {
        h.extend(tasks.iter().map(|t| format!("{prefix}_{}", t.short())));
    }
    h.push("combined_loss".into());
    h.extend(tasks.iter().map(|t| format!("weight_{}", t.short())));
    h
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Renders `rows` as CSV text with a header row.
pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<String> {
    let tasks = rows.first().map(|r| r.tasks.clone()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(&tasks)).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string()];
        for col in [&r.train_loss, &r.val_loss, &r.val_accuracy] {
            rec.extend(col.iter().map(f64::to_string));
        }
        rec.push(r.combined_loss.to_string());
        rec.extend(r.weights.iter().map(f64::to_string));
        w.write_record(rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(rows)?).map_err(|e| Error::io(path, e))
}

/// `epoch,seconds` per row.
pub fn write_timing_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from("epoch,seconds\n");
    for r in rows {
        text.push_str(&format!("{},{:.3}\n", r.epoch, r.wall_clock_secs));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
