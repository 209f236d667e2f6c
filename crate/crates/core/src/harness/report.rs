//! Experiment reports and their CSV/JSON forms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "kind,level,n_samples,ff_acc,contrastive_acc,gain";

/// One evaluation cell: both inference paths over the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: String,
    pub level: u32,
    pub n_samples: usize,
    pub ff_acc: f64,
    pub contrastive_acc: f64,
    pub gain: f64,
}

impl ReportRow {
    pub fn new(
        kind: impl Into<String>,
        level: u32,
        n_samples: usize,
        ff_acc: f64,
        contrastive_acc: f64,
    ) -> Self {
        ReportRow {
            kind: kind.into(),
            level,
            n_samples,
            ff_acc,
            contrastive_acc,
            gain: contrastive_acc - ff_acc,
        }
    }
}

/// Means over a group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub ff_mean: f64,
    pub contrastive_mean: f64,
    pub gain_mean: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub aggregates: Vec<Aggregate>,
    /// Labels ordered best first, where the experiment ranks anything.
    #[serde(default)]
    pub ranking: Vec<String>,
    /// Published full-scale numbers for context.
    #[serde(default)]
    pub reference: Vec<(String, f64)>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>) -> Self {
        ExperimentReport {
            name: name.into(),
            rows: Vec::new(),
            aggregates: Vec::new(),
            ranking: Vec::new(),
            reference: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    /// Rows whose kind satisfies `pred` and whose level is in `levels`.
    pub fn select<'a>(
        &'a self,
        pred: impl Fn(&str) -> bool + 'a,
        levels: &'a [u32],
    ) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| pred(&r.kind) && (levels.is_empty() || levels.contains(&r.level)))
    }

    /// Mean gain of rows matching `kind` at `levels` (all levels if empty).
    pub fn mean_gain(&self, kind: &str, levels: &[u32]) -> Option<f64> {
        mean(self.select(|k| k == kind, levels).map(|r| r.gain))
    }

    pub fn aggregate(&self, label: &str, pred: impl Fn(&str) -> bool) -> Option<Aggregate> {
        let rows: Vec<&ReportRow> = self.select(pred, &[]).collect();
        if rows.is_empty() {
            return None;
        }
        let ff = mean(rows.iter().map(|r| r.ff_acc))?;
        let ca = mean(rows.iter().map(|r| r.contrastive_acc))?;
        Some(Aggregate {
            label: label.to_string(),
            ff_mean: ff,
            contrastive_mean: ca,
            gain_mean: mean(rows.iter().map(|r| r.gain))?,
            rows: rows.len(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.kind, r.level, r.n_samples, r.ff_acc, r.contrastive_acc, r.gain
            ));
        }
        out
    }

    /// Parse CSV rows; the gain column is recomputed and must agree.
    pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == CSV_HEADER => {}
            other => return Err(Error::format(format!("unexpected CSV header {other:?}"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::format(format!("line {}: expected 6 fields", n + 2)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::format(format!("line {}: bad number `{s}`", n + 2)))
            };
            let level = f[1]
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad level", n + 2)))?;
            let n_samples = f[2]
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad count", n + 2)))?;
            let row = ReportRow::new(f[0], level, n_samples, num(f[3])?, num(f[4])?);
            check_gain(&row, num(f[5])?)?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut rep: ExperimentReport = serde_json::from_str(text)?;
        for r in rep.rows.iter_mut() {
            let stored = r.gain;
            r.gain = r.contrastive_acc - r.ff_acc;
            check_gain(r, stored)?;
        }
        Ok(rep)
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
        let text = match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json()?,
        };
        fs::write(path, text)?;
        Ok(())
    }
}

fn check_gain(row: &ReportRow, stored: f64) -> Result<()> {
    if stored.to_bits() != row.gain.to_bits() {
        return Err(Error::format(format!(
            "row {} level {}: stored gain {stored} differs from recomputed {}",
            row.kind, row.level, row.gain
        )));
    }
    Ok(())
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::invalid(format!("unknown report format `{s}`"))),
        }
    }
}
