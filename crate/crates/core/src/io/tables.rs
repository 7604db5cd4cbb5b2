use std::path::Path;

use crate::analysis::{InterferenceMatrix, RoutingHistogram};
use crate::error::Result;
use crate::train::{HistoryRow, RecordMetrics};

/// Shortest decimal that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.center_id.to_string(),
                fmt_f64(r.train_loss),
                fmt_f64(r.val_psnr),
            ]
        })
        .collect();
    write_rows(path, &strings(&["epoch", "center_id", "train_loss", "val_psnr"]), &body)
}

pub fn write_metrics_csv(path: &Path, rows: &[RecordMetrics]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.center_id.to_string(),
                r.split.name().to_string(),
                r.index.to_string(),
                fmt_f64(r.psnr),
                fmt_f64(r.input_psnr),
                fmt_opt(r.b_mean),
                fmt_opt(r.b_max),
            ]
        })
        .collect();
    write_rows(
        path,
        &strings(&["center_id", "split", "index", "psnr", "input_psnr", "b_mean", "b_max"]),
        &body,
    )
}

/// Header of center ids, then one row per center.
pub fn write_interference_csv(path: &Path, m: &InterferenceMatrix) -> Result<()> {
    let mut header = vec!["center".to_string()];
    header.extend(m.task_ids.iter().map(u32::to_string));
    let body: Vec<Vec<String>> = m
        .task_ids
        .iter()
        .zip(&m.values)
        .map(|(id, row)| {
            let mut r = vec![id.to_string()];
            r.extend(row.iter().map(|&v| fmt_f64(v)));
            r
        })
        .collect();
    write_rows(path, &header, &body)
}

pub fn write_histogram_csv(path: &Path, h: &RoutingHistogram) -> Result<()> {
    let body: Vec<Vec<String>> = h
        .rows()
        .into_iter()
        .map(|(l, b, c, e, n)| vec![l.to_string(), b.label().to_string(), c.to_string(), e.to_string(), n.to_string()])
        .collect();
    write_rows(path, &strings(&["layer", "bank", "center", "expert", "count"]), &body)
}

/// Free-form table with a header.
pub fn write_table_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    write_rows(path, header, rows)
}
