//! Plot-ready series from result CSVs.
//!
//! Output is whitespace separated: a `#` header line, then one row per x
//! value in ascending order with a mean and a sample standard deviation
//! column per series. Missing points are written as `nan`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FigureId {
    /// Sum rate vs SNR from sweep CSVs; one series per input file.
    RateVsSnr,
    /// NMSE vs SNR from sweep CSVs; one series per input file.
    NmseVsSnr,
    /// Sum rate vs step from training traces; one series per input file.
    Trace,
    /// Per-frame sum rate from online runs; one series per input file.
    Frames,
    /// Signalling bits vs frame count; one series per scheme column.
    Overhead,
}

impl FigureId {
    /// X column and y columns; an empty y list means every non-x column.
    fn columns(self) -> (&'static str, &'static [&'static str]) {
        match self {
            FigureId::RateVsSnr => ("snr_db", &["sum_rate"]),
            FigureId::NmseVsSnr => ("snr_db", &["nmse"]),
            FigureId::Trace => ("step", &["sum_rate"]),
            FigureId::Frames => ("frame", &["sum_rate"]),
            FigureId::Overhead => ("frames", &[]),
        }
    }

    fn series_per_file(self) -> bool {
        self != FigureId::Overhead
    }
}

/// A parsed CSV: header and rows of raw fields. `#` lines are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(input: &mut dyn BufRead, name: &str) -> Result<Self> {
        let mut header = None;
        let mut rows = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
            match &header {
                None => header = Some(fields),
                Some(h) => {
                    if fields.len() != h.len() {
                        return Err(Error::Schema(format!(
                            "{name}: row has {} fields, header has {}",
                            fields.len(),
                            h.len()
                        )));
                    }
                    rows.push(fields);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Schema(format!("{name}: missing header")))?;
        Ok(Table { header, rows })
    }

    fn column(&self, name: &str, file: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{file}: missing column `{name}`")))
    }
}

fn number(field: &str, file: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Schema(format!("{file}: `{field}` is not a number")))
}

/// Sample mean and standard deviation; a single value has deviation 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregated series keyed by x value, in first-seen series order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Figure {
    pub series: Vec<String>,
    /// x value -> samples of each series.
    points: BTreeMap<OrderedX, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedX(f64);

impl Eq for OrderedX {}

impl Ord for OrderedX {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for OrderedX {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Figure {
    fn series_index(&mut self, name: &str) -> usize {
        match self.series.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                self.series.push(name.to_string());
                self.series.len() - 1
            }
        }
    }

    fn add(&mut self, series: usize, x: f64, y: f64) {
        let slots = self.points.entry(OrderedX(x)).or_default();
        if slots.len() <= series {
            slots.resize(series + 1, Vec::new());
        }
        slots[series].push(y);
    }

    /// Adds the rows of one input table; `label` names its series.
    pub fn add_table(&mut self, id: FigureId, table: &Table, label: &str) -> Result<()> {
        let (x_name, y_names) = id.columns();
        let x_col = table.column(x_name, label)?;
        let y_cols: Vec<(String, usize)> = if y_names.is_empty() {
            table
                .header
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != x_col)
                .map(|(i, h)| (h.clone(), i))
                .collect()
        } else {
            y_names
                .iter()
                .map(|y| Ok((y.to_string(), table.column(y, label)?)))
                .collect::<Result<_>>()?
        };
        let indices: Vec<usize> = y_cols
            .iter()
            .map(|(name, _)| {
                let series = if id.series_per_file() { label.to_string() } else { name.clone() };
                self.series_index(&series)
            })
            .collect();
        for row in &table.rows {
            let x = number(&row[x_col], label)?
                .ok_or_else(|| Error::Schema(format!("{label}: empty `{x_name}` value")))?;
            for ((_, col), &series) in y_cols.iter().zip(&indices) {
                if let Some(y) = number(&row[*col], label)? {
                    self.add(series, x, y);
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, out: &mut dyn Write) -> Result<()> {
        let mut header = String::from("# x");
        for s in &self.series {
            header.push_str(&format!(" {s}_mean {s}_std"));
        }
        writeln!(out, "{header}")?;
        for (x, slots) in &self.points {
            let mut line = format!("{}", x.0);
            for i in 0..self.series.len() {
                match slots.get(i).filter(|v| !v.is_empty()) {
                    Some(v) => {
                        let (m, s) = mean_std(v);
                        line.push_str(&format!(" {m} {s}"));
                    }
                    None => line.push_str(" nan nan"),
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Series label of an input path: its file stem.
pub fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> Table {
        Table::read(&mut text.as_bytes(), "t").unwrap()
    }

    fn render(fig: &Figure) -> String {
        let mut buf = Vec::new();
        fig.write(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn single_row_gives_single_point() {
        let mut fig = Figure::default();
        fig.add_table(FigureId::RateVsSnr, &table("seed,snr_db,sum_rate,nmse\n1,10,3.5,0.2\n"), "rls").unwrap();
        assert_eq!(render(&fig), "# x rls_mean rls_std\n10 3.5 0\n");
    }

    #[test]
    fn identical_rows_have_zero_std() {
        let mut fig = Figure::default();
        let t = table("seed,snr_db,sum_rate,nmse\n1,0,2.25,\n2,0,2.25,\n3,0,2.25,\n");
        fig.add_table(FigureId::RateVsSnr, &t, "a").unwrap();
        assert_eq!(render(&fig), "# x a_mean a_std\n0 2.25 0\n");
    }

    #[test]
    fn std_is_the_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn missing_series_points_are_nan() {
        let mut fig = Figure::default();
        fig.add_table(FigureId::RateVsSnr, &table("seed,snr_db,sum_rate,nmse\n1,0,1,\n"), "a").unwrap();
        fig.add_table(FigureId::RateVsSnr, &table("seed,snr_db,sum_rate,nmse\n1,5,2,\n"), "b").unwrap();
        assert_eq!(render(&fig), "# x a_mean a_std b_mean b_std\n0 1 0 nan nan\n5 nan nan 2 0\n");
    }

    #[test]
    fn overhead_uses_one_series_per_column() {
        let mut fig = Figure::default();
        fig.add_table(FigureId::Overhead, &table("frames,single,offline,online\n1,10,20,30\n"), "o").unwrap();
        assert_eq!(fig.series, ["single", "offline", "online"]);
    }

    #[test]
    fn schema_errors() {
        let mut fig = Figure::default();
        let bad = table("seed,snr,sum_rate\n1,0,1\n");
        assert!(matches!(fig.add_table(FigureId::RateVsSnr, &bad, "x"), Err(Error::Schema(_))));
        let text = table("seed,snr_db,sum_rate,nmse\n1,zero,1,\n");
        assert!(matches!(fig.add_table(FigureId::RateVsSnr, &text, "x"), Err(Error::Schema(_))));
        assert!(matches!(Table::read(&mut "a,b\n1\n".as_bytes(), "x"), Err(Error::Schema(_))));
        assert!(matches!(Table::read(&mut "".as_bytes(), "x"), Err(Error::Schema(_))));
    }
}
