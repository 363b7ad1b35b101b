//! Result tables and their CSV / JSON files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Num)
    }
}

/// Where the numbers came from; appended to every CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunInfo {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    pub info: RunInfo,
}

impl ResultTable {
    pub fn new(columns: &[&'static str], info: RunInfo) -> Self {
        Self { columns: columns.to_vec(), rows: Vec::new(), info }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the schema");
        self.rows.push(row);
    }

    /// Header plus rows; floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<&str> = self.columns.iter().copied().chain(["n_paths", "dt", "seed"]).collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for row in &self.rows {
            let mut first = true;
            for cell in row {
                if !first {
                    s.push(',');
                }
                first = false;
                match cell {
                    Cell::Num(x) => write!(s, "{x:?}").expect("write to string"),
                    Cell::Text(t) => s.push_str(t),
                    Cell::Empty => {}
                }
            }
            writeln!(s, ",{},{:?},{}", self.info.n_paths, self.info.dt, self.info.seed).expect("write to string");
        }
        s
    }
}

#[derive(Debug, Serialize)]
pub struct Metadata<'a> {
    pub scenario: &'a str,
    pub config: serde_json::Value,
    pub versions: Versions,
    pub run: RunInfo,
    pub rows: usize,
    pub wall_time_seconds: f64,
    pub summary: serde_json::Value,
    pub invariant_violations: &'a [String],
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub insider_lab: &'static str,
    pub sdde_insider: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Self { insider_lab: env!("CARGO_PKG_VERSION"), sdde_insider: sdde_insider::VERSION }
    }
}

/// Writes `<scenario>.csv` and `<scenario>.meta.json` into `dir`.
pub fn write_outputs(dir: &Path, scenario: &str, table: &ResultTable, meta: &Metadata<'_>) -> io::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{scenario}.csv"));
    let json = dir.join(format!("{scenario}.meta.json"));
    fs::write(&csv, table.to_csv())?;
    let body = serde_json::to_string_pretty(meta).map_err(io::Error::other)?;
    fs::write(&json, body + "\n")?;
    Ok((csv, json))
}
