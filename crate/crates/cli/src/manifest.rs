//! Run manifest and the per-run report that experiments fill in.

use std::path::{Path, PathBuf};

use adiabatic_lab::io::{emit_plot_data, write_csv, write_json, PlotSeries};
use serde::Serialize;

use crate::config::{ExperimentConfig, Format};
use crate::error::{CliResult, Stage};

#[derive(Clone, Debug, Serialize)]
pub struct InvariantRecord {
    pub name: String,
    /// What the check establishes, in words.
    pub claim: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

/// Everything an experiment reports besides its artifact files.
#[derive(Debug, Default, Serialize)]
pub struct Report {
    pub claims: Vec<String>,
    pub diagnostics: serde_json::Map<String, serde_json::Value>,
    pub invariants: Vec<InvariantRecord>,
    pub artifacts: Vec<String>,
    #[serde(skip)]
    out: PathBuf,
    #[serde(skip)]
    csv: bool,
    #[serde(skip)]
    json: bool,
}

impl Report {
    pub fn new(out: &Path, cfg: &ExperimentConfig) -> Self {
        Report { out: out.to_path_buf(), csv: cfg.writes(Format::Csv), json: cfg.writes(Format::Json), ..Default::default() }
    }

    pub fn claim(&mut self, text: &str) {
        self.claims.push(text.to_string());
    }

    pub fn diag(&mut self, key: &str, value: impl Serialize) {
        self.diagnostics.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    fn record(&mut self, name: &str, claim: &str, value: f64, bound: String, passed: bool) {
        self.invariants.push(InvariantRecord { name: name.into(), claim: claim.into(), value, bound, passed });
    }

    pub fn check_le(&mut self, name: &str, claim: &str, value: f64, bound: f64) {
        self.record(name, claim, value, format!("≤ {bound:e}"), value <= bound);
    }

    pub fn check_ge(&mut self, name: &str, claim: &str, value: f64, bound: f64) {
        self.record(name, claim, value, format!("≥ {bound:e}"), value >= bound);
    }

    pub fn check_within(&mut self, name: &str, claim: &str, value: f64, target: f64, tol: f64) {
        self.record(name, claim, value, format!("{target} ± {tol}"), (value - target).abs() <= tol);
    }

    pub fn check(&mut self, name: &str, claim: &str, value: f64, passed: bool) {
        self.record(name, claim, value, "true".into(), passed);
    }

    pub fn failing(&self) -> Vec<String> {
        self.invariants.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect()
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
        if self.csv {
            let path = self.out.join(name);
            write_csv(&path, header, rows).stage("write_output")?;
            self.artifacts.push(name.into());
        }
        Ok(())
    }

    /// CSV with its axis-semantics sidecar.
    pub fn plot(&mut self, name: &str, series: &PlotSeries) -> CliResult<()> {
        if self.csv {
            emit_plot_data(series, &self.out.join(name)).stage("write_output")?;
            self.artifacts.push(name.into());
            self.artifacts.push(adiabatic_lab::io::sidecar_path(Path::new(name)).display().to_string());
        }
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        if self.json {
            write_json(&self.out.join(name), value).stage("write_output")?;
            self.artifacts.push(name.into());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_path: String,
    /// Parsed configuration, or `null` if it did not parse.
    pub config: serde_json::Value,
    pub kind: Option<String>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub wall_time_s: f64,
    /// `ok`, `config_invalid`, `numerical_failure` or `invariant_failure`.
    pub status: String,
    pub exit_code: u8,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub failing_invariants: Vec<String>,
    #[serde(flatten)]
    pub report: Report,
}
