//! Score tables: one row per method or `k`, recall block then F1 block.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ablation::AblationRow;
use super::metrics::AttributeScores;

pub const ATTRIBUTE_COLUMNS: [&str; 4] = ["Category", "Quantity", "Location", "Relation"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub scores: AttributeScores,
    #[serde(default)]
    pub evaluated: usize,
    #[serde(default)]
    pub failures: usize,
}

impl ReportRow {
    pub fn from_ablation(row: &AblationRow) -> Self {
        Self {
            method: format!("k={}", row.k),
            scores: row.scores,
            evaluated: row.evaluated,
            failures: row.failures,
        }
    }

    /// Recall for the four attributes, then F1 for the four attributes.
    pub fn cells(&self) -> [f64; 8] {
        let s = &self.scores;
        [
            s.category.recall,
            s.quantity.recall,
            s.location.recall,
            s.relation.recall,
            s.category.f1,
            s.quantity.f1,
            s.location.f1,
            s.relation.f1,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!(
                "unknown report format `{other}` (expected md or csv)"
            )),
        }
    }
}

fn header() -> Vec<String> {
    let mut h = vec!["Method".to_string()];
    for block in ["Recall", "F1"] {
        h.extend(ATTRIBUTE_COLUMNS.iter().map(|a| format!("{block} {a}")));
    }
    h
}

/// Renders rows in the given order with four decimal places.
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let mut out = String::new();
    let head = header();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", head.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(head.len()));
            for row in rows {
                let cells: Vec<String> = row.cells().iter().map(|v| format!("{v:.4}")).collect();
                let _ = writeln!(out, "| {} | {} |", row.method, cells.join(" | "));
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "{}", head.join(","));
            for row in rows {
                let cells: Vec<String> = row.cells().iter().map(|v| format!("{v:.4}")).collect();
                let _ = writeln!(out, "{},{}", csv_field(&row.method), cells.join(","));
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
