//! CSV and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Named columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.columns.push((name.into(), values));
        self
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.1.len())
    }

    fn check(&self) -> Result<(), CliError> {
        let n = self.n_rows();
        match self.columns.iter().find(|c| c.1.len() != n) {
            Some((name, v)) => Err(CliError::Config(format!(
                "column '{name}' has {} rows, expected {n}",
                v.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Writes a header row and one line per row, LF-terminated. Floats use the
/// shortest decimal form that parses back to the same bits.
pub fn emit_csv(table: &Table, path: &Path) -> Result<(), CliError> {
    table.check()?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(table.columns.iter().map(|c| c.0.as_str()))?;
    let mut row = Vec::with_capacity(table.columns.len());
    for r in 0..table.n_rows() {
        row.clear();
        row.extend(table.columns.iter().map(|c| format_float(c.1[r])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

/// Reads a file written by [`emit_csv`].
pub fn read_csv(path: &Path) -> Result<Table, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut columns: Vec<(String, Vec<f64>)> = names.into_iter().map(|n| (n, Vec::new())).collect();
    for record in r.records() {
        let record = record?;
        for (col, field) in columns.iter_mut().zip(record.iter()) {
            let v = field
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("not a number in {}: '{field}'", path.display())))?;
            col.1.push(v);
        }
    }
    Ok(Table { columns })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Files written by one experiment, relative to its output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub files: Vec<String>,
}

/// Tracks written files so the manifest lists exactly what was created.
pub(crate) struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub(crate) fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub(crate) fn csv(&mut self, name: &str, table: &Table) -> Result<String, CliError> {
        emit_csv(table, &self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(name.to_string())
    }

    pub(crate) fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<String, CliError> {
        write_json(value, &self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(name.to_string())
    }

    pub(crate) fn finish(self, experiment: &str) -> Result<Manifest, CliError> {
        let manifest = Manifest { experiment: experiment.to_string(), files: self.files };
        write_json(&manifest, &self.dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
