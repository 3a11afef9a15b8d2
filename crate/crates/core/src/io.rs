//! Output formats: CSV tables and a raw little-endian matrix dump.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back with `str::parse::<f64>` is bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{IsmpError, Result};

const MATRIX_MAGIC: &[u8; 5] = b"ISMP1";

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// A header plus string rows; the header fixes the column count.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.headers.len() {
            return Err(IsmpError::InvalidArgument(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.headers.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_floats(&mut self, row: &[f64]) -> Result<()> {
        self.push(row.iter().map(|&v| fmt_f64(v)).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner()
            .map_err(|e| IsmpError::Io(std::io::Error::other(e.to_string())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.iter().map(str::to_owned).collect();
        let mut table = Self { headers, rows: Vec::new() };
        for rec in r.records() {
            table.rows.push(rec?.iter().map(str::to_owned).collect());
        }
        Ok(table)
    }

    /// Parses column `name` as floats.
    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IsmpError::InvalidArgument(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| {
                r[j].parse::<f64>().map_err(|e| {
                    IsmpError::InvalidArgument(format!("column '{name}': '{}': {e}", r[j]))
                })
            })
            .collect()
    }
}

/// Writes `ISMP1`, `rows` and `cols` as little-endian u64, then row-major f64.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if rows * cols != data.len() {
        return Err(IsmpError::InvalidArgument(format!(
            "{rows}x{cols} matrix needs {} values, got {}",
            rows * cols,
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(IsmpError::InvalidArgument(format!(
            "{} is not a matrix dump",
            path.display()
        )));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Ok((rows, cols, data))
}
