//! CSV files and plain-text tables for metric summaries.

use std::io::Write;
use std::path::Path;

use a2r2::metrics::{MetricSnapshot, COLUMNS};
use a2r2::record::RunSummary;
use anyhow::{Context, Result};

pub fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn metric_cells(m: &MetricSnapshot) -> Vec<String> {
    let mut cells: Vec<String> = m.values().iter().map(|v| fmt(*v)).collect();
    cells.push(m.edit_raw.to_string());
    cells
}

fn metric_header() -> Vec<&'static str> {
    let mut h = COLUMNS.to_vec();
    h.push("edit_raw");
    h
}

/// Mean of the raw edit counts, kept fractional for aggregate rows.
fn mean_edit_raw(ms: &[MetricSnapshot]) -> f64 {
    ms.iter().map(|m| m.edit_raw as f64).sum::<f64>() / ms.len() as f64
}

fn aggregate_cells(ms: &[MetricSnapshot]) -> Vec<String> {
    match MetricSnapshot::mean(ms) {
        Some(mean) => {
            let mut cells: Vec<String> = mean.values().iter().map(|v| fmt(*v)).collect();
            cells.push(fmt(mean_edit_raw(ms)));
            cells
        }
        None => vec![String::new(); COLUMNS.len() + 1],
    }
}

fn mean_usize(values: impl Iterator<Item = usize>) -> Option<f64> {
    let v: Vec<usize> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<usize>() as f64 / v.len() as f64)
}

pub fn mean_residual(summaries: &[RunSummary]) -> Option<f64> {
    mean_usize(summaries.iter().filter_map(|s| s.residual_tokens))
}

pub fn scored(summaries: &[RunSummary]) -> Vec<MetricSnapshot> {
    summaries.iter().filter_map(|s| s.metrics).collect()
}

/// Per-instance rows of a batch plus a final `mean` row.
pub fn write_batch_csv(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["id", "termination", "rounds", "residual_tokens"];
    header.extend(metric_header());
    w.write_record(&header)?;
    for s in summaries {
        let mut row = vec![
            s.instance_id.clone(),
            s.termination.as_str().to_string(),
            s.rounds.to_string(),
            s.residual_tokens.map(|r| r.to_string()).unwrap_or_default(),
        ];
        match &s.metrics {
            Some(m) => row.extend(metric_cells(m)),
            None => row.extend(vec![String::new(); COLUMNS.len() + 1]),
        }
        w.write_record(&row)?;
    }
    let mut mean = vec![
        "mean".to_string(),
        String::new(),
        mean_usize(summaries.iter().map(|s| s.rounds)).map(fmt).unwrap_or_default(),
        mean_residual(summaries).map(fmt).unwrap_or_default(),
    ];
    mean.extend(aggregate_cells(&scored(summaries)));
    w.write_record(&mean)?;
    w.flush()?;
    Ok(())
}

/// Per-instance metric rows plus a `mean` row, for scored predictions.
pub fn write_metrics_csv(out: impl Write, rows: &[(String, MetricSnapshot)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id"];
    header.extend(metric_header());
    w.write_record(&header)?;
    for (id, m) in rows {
        let mut row = vec![id.clone()];
        row.extend(metric_cells(m));
        w.write_record(&row)?;
    }
    let ms: Vec<MetricSnapshot> = rows.iter().map(|(_, m)| *m).collect();
    let mut mean = vec!["mean".to_string()];
    mean.extend(aggregate_cells(&ms));
    w.write_record(&mean)?;
    w.flush()?;
    Ok(())
}

/// A labelled row of aggregate batch results (one per round limit or variant).
pub struct AggregateRow {
    pub label: String,
    pub instances: usize,
    pub residual: Option<f64>,
    pub metrics: Option<MetricSnapshot>,
    pub edit_raw: Option<f64>,
}

impl AggregateRow {
    pub fn from_summaries(label: String, summaries: &[RunSummary]) -> Self {
        let ms = scored(summaries);
        Self {
            label,
            instances: summaries.len(),
            residual: mean_residual(summaries),
            metrics: MetricSnapshot::mean(&ms),
            edit_raw: (!ms.is_empty()).then(|| mean_edit_raw(&ms)),
        }
    }

    fn cells(&self) -> Vec<String> {
        let mut row = vec![
            self.label.clone(),
            self.instances.to_string(),
            self.residual.map(fmt).unwrap_or_default(),
        ];
        match &self.metrics {
            Some(m) => {
                row.extend(m.values().iter().map(|v| fmt(*v)));
                row.push(self.edit_raw.map(fmt).unwrap_or_default());
            }
            None => row.extend(vec![String::new(); COLUMNS.len() + 1]),
        }
        row
    }
}

fn aggregate_header(label: &'static str) -> Vec<&'static str> {
    let mut h = vec![label, "instances", "residual_errors"];
    h.extend(metric_header());
    h
}

pub fn write_aggregate_csv(path: &Path, label: &'static str, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(aggregate_header(label))?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    w.flush()?;
    Ok(())
}

/// Left-aligned, space-padded table.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn aggregate_table(label: &'static str, rows: &[AggregateRow]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(AggregateRow::cells).collect();
    render_table(&aggregate_header(label), &cells)
}
