//! Grouped metric tables and their serialization to csv/json/markdown.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc, ece, EceConfig};
use crate::scoring::CalibrationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Acc,
    Ece,
    Auroc,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Acc => "acc",
            MetricKind::Ece => "ece",
            MetricKind::Auroc => "auroc",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc" | "accuracy" => Ok(MetricKind::Acc),
            "ece" => Ok(MetricKind::Ece),
            "auroc" => Ok(MetricKind::Auroc),
            other => Err(Error::UnknownGroupLabel(format!("metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for EmitFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EmitFormat::Csv),
            "json" => Ok(EmitFormat::Json),
            "markdown" | "md" => Ok(EmitFormat::Markdown),
            other => Err(Error::UnknownGroupLabel(format!("format {other:?}"))),
        }
    }
}

const GROUP_LABELS: &[&str] = &["category", "subtask", "modality", "strategy", "eval_config"];

fn label_value(record: &CalibrationRecord, label: &str) -> String {
    match label {
        "category" => record.group.category.clone(),
        "subtask" => record.group.subtask.clone(),
        "modality" => record.group.modality.clone(),
        "strategy" => record.group.strategy.clone(),
        "eval_config" => record.group.eval_config.clone(),
        _ => unreachable!("labels validated before grouping"),
    }
}

/// Metrics (rows) by group keys (columns); cells are preformatted strings so
/// emission in any format is byte-deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub group_by: Vec<String>,
    /// Sorted composite group keys ("algorithms/image" style when grouping by
    /// more than one label).
    pub columns: Vec<String>,
    pub metrics: Vec<MetricKind>,
    /// cells[row][col], aligned with `metrics` × `columns`.
    pub cells: Vec<Vec<String>>,
}

fn format_metric(metric: MetricKind, value: f64) -> String {
    match metric {
        MetricKind::Acc => format!("{:.1}", value * 100.0),
        MetricKind::Ece | MetricKind::Auroc => format!("{value:.3}"),
    }
}

fn metric_cell(metric: MetricKind, records: &[CalibrationRecord], cfg: &EceConfig) -> String {
    let value = match metric {
        MetricKind::Acc => accuracy(records, cfg.attempted_only),
        MetricKind::Ece => ece(records, cfg),
        MetricKind::Auroc => auroc(records, cfg.attempted_only),
    };
    match value {
        Ok(v) => format_metric(metric, v),
        Err(_) => "-".to_string(), // degenerate or empty after filtering
    }
}

/// Aggregates records into a table: one column per non-empty group, one row
/// per requested metric.
///
/// For semantically_aligned groups not already split by modality, cells show
/// the two modalities as an image/text slash pair.
pub fn aggregate(
    records: &[CalibrationRecord],
    group_by: &[String],
    metrics: &[MetricKind],
    cfg: &EceConfig,
) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    for label in group_by {
        if !GROUP_LABELS.contains(&label.as_str()) {
            return Err(Error::UnknownGroupLabel(label.clone()));
        }
    }

    let mut groups: BTreeMap<String, Vec<CalibrationRecord>> = BTreeMap::new();
    for record in records {
        let key = if group_by.is_empty() {
            "all".to_string()
        } else {
            group_by
                .iter()
                .map(|l| label_value(record, l))
                .collect::<Vec<_>>()
                .join("/")
        };
        groups.entry(key).or_default().push(record.clone());
    }

    let split_modality = !group_by.iter().any(|l| l == "modality");
    let columns: Vec<String> = groups.keys().cloned().collect();
    let mut cells = Vec::with_capacity(metrics.len());
    for metric in metrics {
        let mut row = Vec::with_capacity(columns.len());
        for key in &columns {
            let members = &groups[key];
            let aligned = members.iter().all(|r| r.group.eval_config == "semantically_aligned");
            let image: Vec<CalibrationRecord> = members
                .iter()
                .filter(|r| r.group.modality == "image")
                .cloned()
                .collect();
            let text: Vec<CalibrationRecord> = members
                .iter()
                .filter(|r| r.group.modality == "text")
                .cloned()
                .collect();
            let cell = if aligned && split_modality && !image.is_empty() && !text.is_empty() {
                format!(
                    "{}/{}",
                    metric_cell(*metric, &image, cfg),
                    metric_cell(*metric, &text, cfg)
                )
            } else {
                metric_cell(*metric, members, cfg)
            };
            row.push(cell);
        }
        cells.push(row);
    }

    Ok(ReportTable {
        group_by: group_by.to_vec(),
        columns,
        metrics: metrics.to_vec(),
        cells,
    })
}

/// Renders the table in the given format. Output is deterministic: columns are
/// sorted at aggregation time and numbers are preformatted.
pub fn render(table: &ReportTable, format: EmitFormat) -> String {
    match format {
        EmitFormat::Csv => {
            let mut out = String::from("metric");
            for col in &table.columns {
                out.push(',');
                out.push_str(col);
            }
            out.push('\n');
            for (metric, row) in table.metrics.iter().zip(&table.cells) {
                out.push_str(metric.as_str());
                for cell in row {
                    out.push(',');
                    out.push_str(cell);
                }
                out.push('\n');
            }
            out
        }
        EmitFormat::Json => {
            // column -> metric -> cell, BTreeMap for stable key order
            let mut body: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
            for (ci, col) in table.columns.iter().enumerate() {
                let mut per_metric = BTreeMap::new();
                for (mi, metric) in table.metrics.iter().enumerate() {
                    per_metric.insert(metric.as_str(), table.cells[mi][ci].as_str());
                }
                body.insert(col, per_metric);
            }
            let mut out = serde_json::to_string_pretty(&body).expect("string map serializes");
            out.push('\n');
            out
        }
        EmitFormat::Markdown => {
            let mut out = String::from("| metric |");
            for col in &table.columns {
                out.push_str(&format!(" {col} |"));
            }
            out.push_str("\n|---|");
            for _ in &table.columns {
                out.push_str("---|");
            }
            out.push('\n');
            for (metric, row) in table.metrics.iter().zip(&table.cells) {
                out.push_str(&format!("| {} |", metric.as_str()));
                for cell in row {
                    out.push_str(&format!(" {cell} |"));
                }
                out.push('\n');
            }
            out
        }
    }
}

pub fn emit(table: &ReportTable, format: EmitFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render(table, format))?;
    Ok(())
}
