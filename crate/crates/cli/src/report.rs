//! Report CSVs: writing run results and reading any report back as text.

use std::path::Path;

use adaptqa_core::accounting::CSV_HEADER;

use crate::error::{CliError, Result};

pub const RUN_HEADER_EXTRA: &str = "efficiency_ratio";

/// Columns that hold wall-clock measurements.
pub const TIMING_COLUMNS: &[&str] = &["train_seconds", "inference_seconds"];

pub fn run_header() -> Vec<String> {
    CSV_HEADER
        .split(',')
        .chain([RUN_HEADER_EXTRA])
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub label: String,
    pub layers_trained: usize,
    pub adapter_size: Option<usize>,
    pub trainable_count: u64,
    pub em_percent: f64,
    pub f1_percent: f64,
    pub train_seconds: f64,
    pub inference_seconds: f64,
    pub efficiency_ratio: f64,
}

impl ExperimentReport {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.label.clone(),
            self.layers_trained.to_string(),
            self.adapter_size.map(|a| a.to_string()).unwrap_or_default(),
            self.trainable_count.to_string(),
            format!("{:.4}", self.em_percent),
            format!("{:.4}", self.f1_percent),
            format!("{:.6}", self.train_seconds),
            format!("{:.6}", self.inference_seconds),
            format!("{:.4}", self.efficiency_ratio),
        ]
    }
}

/// A CSV held as text cells, so reading and rewriting is lossless.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let invalid = |e: csv::Error| CliError::Validation(format!("{source}: {e}"));
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader.headers().map_err(invalid)?.iter().map(String::from).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(invalid)?;
        Ok(Self { header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Comma-separated, LF-terminated, no quoting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(&self.rows) {
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path.display(), e))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Index of each requested column, or an error listing all that are absent.
    pub fn require(&self, names: &[&str], source: &str) -> Result<Vec<usize>> {
        let missing: Vec<&str> = names.iter().copied().filter(|n| self.column(n).is_none()).collect();
        if !missing.is_empty() {
            return Err(CliError::Validation(format!("{source}: missing column(s) {}", missing.join(", "))));
        }
        Ok(names.iter().map(|n| self.column(n).unwrap()).collect())
    }

    /// The same table with the named columns dropped.
    pub fn without(&self, names: &[&str]) -> Self {
        let keep: Vec<usize> = (0..self.header.len())
            .filter(|&i| !names.contains(&self.header[i].as_str()))
            .collect();
        let pick = |row: &Vec<String>| keep.iter().filter_map(|&i| row.get(i).cloned()).collect();
        Self {
            header: pick(&self.header),
            rows: self.rows.iter().map(pick).collect(),
        }
    }
}
