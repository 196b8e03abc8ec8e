use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Significant digits of every floating-point value written.
pub const SIG_DIGITS: i32 = 9;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => fixed(*v),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

/// Fixed-point rendering with `SIG_DIGITS` significant digits, e.g. `4.00000000`.
pub fn fixed(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return format!("{:.*}", (SIG_DIGITS - 1) as usize, 0.0);
    }
    let magnitude = v.abs().log10().floor() as i32;
    let mut decimals = (SIG_DIGITS - 1 - magnitude).clamp(0, 40);
    let mut text = format!("{:.*}", decimals as usize, v);
    // rounding can carry into a new leading digit (9.99999999996 -> 10.00000000)
    let digits = text.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() as i32;
    if digits > SIG_DIGITS && decimals > 0 {
        decimals -= 1;
        text = format!("{:.*}", decimals as usize, v);
    }
    text
}

/// A CSV table. Rows may be shorter or longer than the header (trailer rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(schema: &'static str, header: Vec<&'static str>) -> Self {
        Self {
            schema,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| *h == name)
    }

    /// Numeric values of a column over the rows that have one.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        let Some(c) = self.column(name) else { return Vec::new() };
        self.rows.iter().filter_map(|r| r.get(c).and_then(Cell::as_f64)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// The JSON sidecar written next to every CSV file.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub schema: &'static str,
    pub columns: &'a [&'static str],
    pub rows: usize,
    pub seeds: &'a [u64],
    pub config: &'a C,
    pub status: String,
}

pub fn manifest_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    csv.with_file_name(name)
}
