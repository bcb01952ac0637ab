//! Drives one experiment and always leaves a manifest behind.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiments::{self, Context};
use crate::manifest::{Report, RunManifest};

pub const MANIFEST_NAME: &str = "manifest.json";

pub struct Outcome {
    pub exit_code: u8,
    pub error: Option<CliError>,
    pub manifest_path: PathBuf,
}

fn status_of(e: Option<&CliError>) -> &'static str {
    match e {
        None => "ok",
        Some(CliError::ConfigInvalid(_)) => "config_invalid",
        Some(CliError::NumericalFailure { .. }) => "numerical_failure",
        Some(CliError::InvariantFailure(_)) => "invariant_failure",
    }
}

fn execute(cfg: &ExperimentConfig, seed: u64, jobs: usize, report: &mut Report) -> CliResult<()> {
    let model_config = cfg.model_config()?;
    let model = model_config.build().map_err(|e| CliError::ConfigInvalid(format!("model `{}`: {e}", cfg.model.name)))?;
    let ctx = Context { cfg, model_config, model, seed };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::ConfigInvalid(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| experiments::run(&ctx, report))?;
    let failing = report.failing();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::InvariantFailure(failing))
    }
}

pub fn run(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>, jobs: usize) -> Outcome {
    let start = Instant::now();
    let parsed = ExperimentConfig::load(config_path);
    let out_dir = out.unwrap_or_else(|| parsed.as_ref().map(|c| c.output.directory.clone()).unwrap_or_else(|_| PathBuf::from("out")));
    let (config_echo, kind, seed_used, report, result) = match parsed {
        Ok(cfg) => {
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let mut report = Report::new(&out_dir, &cfg);
            let result = std::fs::create_dir_all(&out_dir)
                .map_err(|e| CliError::ConfigInvalid(format!("cannot create {}: {e}", out_dir.display())))
                .and_then(|_| execute(&cfg, seed, jobs, &mut report));
            let echo = serde_json::to_value(&cfg).unwrap_or(serde_json::Value::Null);
            (echo, Some(cfg.kind.as_str().to_string()), Some(seed), report, result)
        }
        Err(e) => (serde_json::Value::Null, None, seed, Report::default(), Err(e)),
    };
    let error = result.err();
    let exit_code = error.as_ref().map_or(0, CliError::exit_code);
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: config_path.display().to_string(),
        config: config_echo,
        kind,
        seed: seed_used,
        jobs,
        wall_time_s: start.elapsed().as_secs_f64(),
        status: status_of(error.as_ref()).to_string(),
        exit_code,
        failed_stage: match &error {
            Some(CliError::NumericalFailure { stage, .. }) => Some(stage.clone()),
            _ => None,
        },
        error: error.as_ref().map(|e| e.to_string()),
        failing_invariants: match &error {
            Some(CliError::InvariantFailure(names)) => names.clone(),
            _ => Vec::new(),
        },
        report,
    };
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let written = std::fs::create_dir_all(&out_dir)
        .map_err(|e| e.to_string())
        .and_then(|_| serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string()))
        .and_then(|text| std::fs::write(&manifest_path, text + "\n").map_err(|e| e.to_string()));
    if let Err(e) = written {
        eprintln!("error: cannot write manifest {}: {e}", manifest_path.display());
    }
    Outcome { exit_code, error, manifest_path }
}
