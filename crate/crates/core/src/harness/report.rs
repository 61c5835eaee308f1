//! CSV and JSON exports of experiment, sweep and diagnostic results.

use std::path::Path;

use super::diagnose::{ShiftDiagnostic, REGIMES};
use super::experiment::{ExperimentReport, ResultRow, SweepReport};
use crate::archive::write_atomic;
use crate::error::Result;

fn csv_bytes<T: serde::Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub const RESULT_HEADER: [&str; 9] =
    ["source", "target", "policy", "beta", "steps", "batch_size", "seed", "metric_name", "value"];

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    csv_bytes(rows, &RESULT_HEADER)
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path, &results_csv(rows)?)
}

/// Summary of an experiment: the config, its fingerprint, and every record.
pub fn write_summary_json(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn sweep_grid_csv(report: &SweepReport) -> Result<Vec<u8>> {
    let rows: Vec<(usize, usize, f64, f64)> = report.cells.iter().map(|c| (c.steps, c.batch_size, c.mean, c.std)).collect();
    csv_bytes(&rows, &["steps", "batch_size", "mean", "std"])
}

pub fn diagnostic_moments_csv(diags: &[ShiftDiagnostic]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for d in diags {
        for (r, m) in REGIMES.iter().zip(&d.moments) {
            rows.push((d.layer, d.channel, *r, m.mean, m.var, d.alpha, d.gamma));
        }
    }
    csv_bytes(&rows, &["layer", "channel", "regime", "mean", "var", "alpha", "gamma"])
}

/// Densities of one channel; `regime` column added so the three curves share a file.
pub fn histogram_csv(diag: &ShiftDiagnostic) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (r, h) in REGIMES.iter().zip(&diag.histograms) {
        for (e, d) in h.edges.windows(2).zip(&h.density) {
            rows.push((e[0], e[1], *d, *r));
        }
    }
    csv_bytes(&rows, &["bin_left", "bin_right", "density", "regime"])
}
