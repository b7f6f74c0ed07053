use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

/// One command result in all three renderings.
pub struct Rendered {
    pub json: String,
    pub csv: String,
    pub text: String,
}

impl Rendered {
    pub fn new(report: &impl Serialize, csv: String, text: String) -> Self {
        let mut json = serde_json::to_string_pretty(report).expect("reports serialize");
        json.push('\n');
        Self { json, csv, text }
    }

    pub fn emit(&self, format: Format, out: Option<&Path>) -> Result<()> {
        let body = match format {
            Format::Json => &self.json,
            Format::Csv => &self.csv,
            Format::Text => &self.text,
        };
        match out {
            Some(path) => fs::write(path, body).with_context(|| format!("writing {}", path.display())),
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(body.as_bytes())?;
                Ok(())
            }
        }
    }
}

/// Joins CSV cells; none of ours contain commas or quotes.
pub fn csv_line(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

pub fn sci(x: f64) -> String {
    format!("{x:.4e}")
}
