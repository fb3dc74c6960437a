//! Machine-readable outputs. Field order of every struct is the key order
//! of `report.json`, so reports diff cleanly between runs.

use std::fs;
use std::path::Path;

use fbsvie::bsvie::SolveStats;
use fbsvie::control::OptRecord;
use serde::Serialize;
use serde_json::Value;

use crate::config::{Format, RunConfig};

/// One comparison of two numbers that should agree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
    /// `|lhs − rhs| / (|lhs| + 1)`.
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let abs_err = (lhs - rhs).abs();
        let rel_err = abs_err / (lhs.abs() + 1.0);
        Self {
            name: name.into(),
            lhs,
            rhs,
            abs_err,
            rel_err,
            tolerance,
            pass: rel_err <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverRecord {
    pub name: String,
    pub iterations: usize,
    pub residual_trail: Vec<f64>,
    pub equation_residual: f64,
}

impl SolverRecord {
    pub fn from_stats(name: impl Into<String>, s: &SolveStats) -> Self {
        Self {
            name: name.into(),
            iterations: s.iterations,
            residual_trail: s.residual_trail.clone(),
            equation_residual: s.equation_residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    pub pass: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub solvers: Vec<SolverRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<OptRecord>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub summary: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            pass: true,
            checks: Vec::new(),
            solvers: Vec::new(),
            history: Vec::new(),
            summary: Value::Null,
            timing: None,
        }
    }

    pub fn failed_checks(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }
}

/// Row of a `(time, statistic, value)` series file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesRow {
    pub time: f64,
    pub statistic: String,
    pub value: f64,
}

type WriteRows = Box<dyn Fn(&mut csv::Writer<fs::File>) -> csv::Result<()>>;

/// A CSV file to write next to the report.
pub struct Table {
    pub file: &'static str,
    pub write: WriteRows,
}

impl Table {
    pub fn rows<R: Serialize + 'static>(file: &'static str, rows: Vec<R>) -> Self {
        Self {
            file,
            write: Box::new(move |w| rows.iter().try_for_each(|r| w.serialize(r))),
        }
    }
}

/// Writes `report.json` and the tables the configuration asks for.
pub fn write_outputs(dir: &Path, report: &RunReport, tables: &[Table]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let out = &report.config.output;
    if out.wants(Format::Json) {
        let mut text = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(dir.join("report.json"), text)?;
    }
    if out.wants(Format::Csv) {
        for t in tables {
            let mut w = csv::Writer::from_path(dir.join(t.file)).map_err(std::io::Error::other)?;
            (t.write)(&mut w).map_err(std::io::Error::other)?;
            w.flush()?;
        }
    }
    Ok(())
}
