//! Evaluation reports: CSV with a commented config echo, and aligned text.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::store::write_atomic;

/// A rectangular table of preformatted cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) -> Result<()> {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        if row.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Cell of `row` under `column`, if both exist.
    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|name| name == column)?;
        self.rows.get(row).map(|r| r[c].as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("cells are UTF-8")
    }

    /// Columns padded to their widest cell; numbers right-aligned.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([self.columns[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let numeric = |s: &str| s.parse::<f64>().is_ok();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| {
                    if numeric(cell) {
                        format!("{cell:>w$}")
                    } else {
                        format!("{cell:<w$}")
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// One command's results plus everything needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub command: String,
    /// Short `key = value` facts (seeds, k, shots, hashes).
    pub echo: Vec<(String, String)>,
    /// Full canonical config text.
    pub config: String,
    pub table: Table,
}

impl EvalReport {
    pub fn new(command: &str, config: &str, table: Table) -> Self {
        Self {
            command: command.to_string(),
            echo: Vec::new(),
            config: config.to_string(),
            table,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.echo.push((key.to_string(), value.to_string()));
        self
    }

    fn header(&self) -> String {
        let mut out = format!("# command = {}\n", self.command);
        for (k, v) in &self.echo {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str("# config:\n");
        for l in self.config.lines() {
            if l.is_empty() {
                out.push_str("#\n");
            } else {
                out.push_str(&format!("#   {l}\n"));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", self.header(), self.table.to_csv())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.command);
        for (k, v) in &self.echo {
            out.push_str(&format!("  {k}: {v}\n"));
        }
        out.push('\n');
        out.push_str(&self.table.to_text());
        out
    }

    /// Write `<stem>.csv` and `<stem>.txt` into `dir`; returns the CSV path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let csv = dir.join(format!("{stem}.csv"));
        write_atomic(&csv, self.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.txt")), self.to_text().as_bytes())?;
        Ok(csv)
    }
}

/// Fixed four-decimal rendering used in every report.
pub fn metric(v: f64) -> String {
    format!("{v:.4}")
}

/// Signed four-decimal rendering for differences.
pub fn delta(v: f64) -> String {
    format!("{v:+.4}")
}

/// Strip the commented header from a report CSV.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}
