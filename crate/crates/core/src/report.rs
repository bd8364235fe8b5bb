//! CSV output. Floats are written as `{:.16e}` so reruns compare byte for byte.

use std::collections::HashMap;
use std::io::{self, Write};

use crate::error::{input_err, Error, Result};

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    /// A value that does not apply to this row, written as an empty field.
    Empty,
}

impl Cell {
    pub fn text(s: impl Into<String>) -> Cell {
        Cell::Text(s.into())
    }

    pub fn opt(x: Option<f64>) -> Cell {
        x.map_or(Cell::Empty, Cell::Float)
    }

    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => format_float(*x),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}

/// A CSV stream with a fixed header; every row must match its width.
pub struct CsvTable<W: Write> {
    writer: csv::Writer<W>,
    width: usize,
}

impl<W: Write> CsvTable<W> {
    pub fn new(w: W, header: &[&str]) -> Result<CsvTable<W>> {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        writer.write_record(header).map_err(csv_err)?;
        Ok(CsvTable { writer, width: header.len() })
    }

    pub fn row(&mut self, cells: &[Cell]) -> Result<()> {
        if cells.len() != self.width {
            return input_err(format!("row has {} fields, header has {}", cells.len(), self.width));
        }
        self.writer.write_record(cells.iter().map(Cell::render)).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub metric: String,
    pub value: f64,
    pub batch_size: usize,
}

/// Append-only `(iteration, metric, value, batch_size)` rows. Iterations
/// may not go backwards within a metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
    last: HashMap<String, u64>,
}

impl MetricsLog {
    pub const HEADER: [&'static str; 4] = ["iteration", "metric", "value", "batch_size"];

    pub fn new() -> MetricsLog {
        MetricsLog::default()
    }

    pub fn push(&mut self, iteration: u64, metric: &str, value: f64, batch_size: usize) -> Result<()> {
        if let Some(&prev) = self.last.get(metric) {
            if iteration < prev {
                return input_err(format!("metric {metric} went back from iteration {prev} to {iteration}"));
            }
        }
        self.last.insert(metric.to_string(), iteration);
        self.rows.push(MetricRow { iteration, metric: metric.to_string(), value, batch_size });
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut table = CsvTable::new(w, &Self::HEADER)?;
        for r in &self.rows {
            table.row(&[Cell::Int(r.iteration), Cell::text(&r.metric), Cell::Float(r.value), Cell::Int(r.batch_size as u64)])?;
        }
        table.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_float_format() {
        let mut buf = Vec::new();
        let mut t = CsvTable::new(&mut buf, &["i", "x", "y"]).unwrap();
        t.row(&[Cell::Int(3), Cell::Float(-0.1), Cell::Empty]).unwrap();
        assert!(t.row(&[Cell::Int(1)]).is_err());
        t.finish().unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,x,y\n3,-1.0000000000000001e-1,\n");
    }

    #[test]
    fn metrics_log_rejects_going_back() {
        let mut log = MetricsLog::new();
        log.push(5, "a", 1.0, 64).unwrap();
        log.push(5, "a", 2.0, 64).unwrap();
        log.push(1, "b", 0.0, 64).unwrap();
        assert!(log.push(4, "a", 0.0, 64).is_err());
        let mut buf = Vec::new();
        log.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("iteration,metric,value,batch_size\n5,a,1.0000000000000000e0,64\n"));
    }

    proptest! {
        #[test]
        fn float_format_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
            let s = format_float(x);
            prop_assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
