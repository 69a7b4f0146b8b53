//! CSV outputs. Reals use 17 significant digits.

use std::path::Path;

use gsglab_core::nn::format_f64;
use gsglab_core::train::MetricsRecord;

use crate::error::CliError;

pub const METRICS_HEADER: [&str; 9] = [
    "epoch", "loss", "lr", "collapse", "knn_acc", "case1", "case2", "case3", "case4",
];

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes `rows` under `header` to `path`.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn metrics_row(m: &MetricsRecord) -> Vec<String> {
    let mut row = vec![
        m.epoch.to_string(),
        format_f64(m.loss),
        format_f64(m.lr),
        format_f64(m.collapse),
        m.knn_acc.map(format_f64).unwrap_or_default(),
    ];
    row.extend(m.cases.iter().map(|c| c.to_string()));
    row
}

pub fn write_metrics(path: &Path, metrics: &[MetricsRecord]) -> Result<(), CliError> {
    let rows: Vec<_> = metrics.iter().map(metrics_row).collect();
    write_csv(path, &METRICS_HEADER, &rows)
}

pub fn optional(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}
