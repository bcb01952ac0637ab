//! CSV and JSON artifacts. Numbers are written with 17 significant digits
//! so that runs can be compared byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{LabError, Result};

/// Round-trip formatting of an `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    if rows.is_empty() {
        return Err(LabError::IoFailure(format!("refusing to write empty series to {}", path.display())));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(LabError::IoFailure(format!("row {bad} has {} columns, header has {}", rows[bad].len(), header.len())));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::with_capacity(rows.len() * header.len() * 24);
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisScale {
    #[default]
    Linear,
    Log,
}

/// A table of plot-ready data with axis semantics for its sidecar.
#[derive(Clone, Debug, Serialize)]
pub struct PlotSeries {
    pub title: String,
    /// Column names, each carrying its unit, e.g. `t [1]`.
    pub columns: Vec<String>,
    #[serde(skip)]
    pub rows: Vec<Vec<f64>>,
    pub x_scale: AxisScale,
    pub y_scale: AxisScale,
    /// Derived quantities (fitted slopes, extrema, ...).
    pub annotations: serde_json::Map<String, serde_json::Value>,
}

impl PlotSeries {
    pub fn new(title: &str, columns: &[&str], rows: Vec<Vec<f64>>) -> Self {
        PlotSeries {
            title: title.to_string(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows,
            x_scale: AxisScale::Linear,
            y_scale: AxisScale::Linear,
            annotations: serde_json::Map::new(),
        }
    }

    pub fn log_log(mut self) -> Self {
        self.x_scale = AxisScale::Log;
        self.y_scale = AxisScale::Log;
        self
    }

    pub fn annotate(mut self, key: &str, value: impl Serialize) -> Self {
        self.annotations.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        self
    }
}

/// Sidecar path: `name.csv` → `name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes the CSV and its JSON sidecar.
pub fn emit_plot_data(series: &PlotSeries, path: &Path) -> Result<()> {
    write_csv(path, &series.columns, &series.rows)?;
    write_json(&sidecar_path(path), series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.csv");
        let x = [0.1, 1.0 / 3.0, -2.5e-17, 6.02e23];
        write_csv(&p, &["x".into()], &x.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let back: Vec<f64> = text.lines().skip(1).map(|l| l.parse().unwrap()).collect();
        assert_eq!(back, x);
    }

    #[test]
    fn plot_data_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("order.csv");
        let s = PlotSeries::new("order", &["epsilon [1]", "sup_error [1]"], vec![vec![0.1, 1e-3], vec![0.05, 5e-4]])
            .log_log()
            .annotate("slope", 1.0);
        emit_plot_data(&s, &p).unwrap();
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(meta["x_scale"], "log");
        assert_eq!(meta["annotations"]["slope"], 1.0);
        assert!(fs::read_to_string(&p).unwrap().starts_with("epsilon [1],sup_error [1]\n"));
    }

    #[test]
    fn empty_series_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = PlotSeries::new("e", &["t", "E"], vec![]);
        assert!(matches!(emit_plot_data(&s, &dir.path().join("e.csv")), Err(LabError::IoFailure(_))));
    }
}
