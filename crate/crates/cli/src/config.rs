//! Declarative experiment description, read from a TOML file.

use std::path::{Path, PathBuf};

use adiabatic_lab::eigenpath::FixedPointConfig;
use adiabatic_lab::model::ModelConfig;
use adiabatic_lab::propagator::{IntegratorConfig, MidpointRule, Scheme};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Eigenpath,
    Spectrum,
    Transport,
    Sweep,
    Bifurcate,
    Discriminant,
    AnharmonicGaps,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Eigenpath => "eigenpath",
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::Transport => "transport",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Bifurcate => "bifurcate",
            ExperimentKind::Discriminant => "discriminant",
            ExperimentKind::AnharmonicGaps => "anharmonic-gaps",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub name: String,
    #[serde(default)]
    pub params: toml::Table,
}

fn default_t_range() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericBlock {
    pub epsilon: Option<f64>,
    /// Strictly decreasing list for sweeps.
    pub epsilons: Option<Vec<f64>>,
    #[serde(default = "default_t_range")]
    pub t_range: [f64; 2],
    pub dt_factor: f64,
    pub scheme: Scheme,
    pub midpoint: MidpointRule,
    pub midpoint_fixed_point_tol: f64,
    pub midpoint_max_iters: usize,
    /// Real parts of the initial state (simulate) or of the path seed.
    pub initial_state: Option<Vec<f64>>,
    pub initial_state_imag: Option<Vec<f64>>,
    pub path: FixedPointConfig,
    pub cluster_tol: Option<f64>,
    /// Number of spectrum samples along the path.
    pub samples: usize,
    /// Number of times in the root-count table.
    pub count_points: usize,
    pub dim: usize,
    pub max_draws: usize,
    pub threshold: f64,
    /// `λ₂ / λ₁` of the assembled Hamiltonian.
    pub lambda_ratio: f64,
    pub coupling: f64,
    pub gap_count: usize,
    /// Also run the source integral with an injected kernel component.
    pub kernel_control: bool,
}

impl Default for NumericBlock {
    fn default() -> Self {
        let ic = IntegratorConfig::default();
        NumericBlock {
            epsilon: None,
            epsilons: None,
            t_range: default_t_range(),
            dt_factor: ic.dt_factor,
            scheme: ic.scheme,
            midpoint: ic.midpoint,
            midpoint_fixed_point_tol: ic.midpoint_fixed_point_tol,
            midpoint_max_iters: ic.midpoint_max_iters,
            initial_state: None,
            initial_state_imag: None,
            path: FixedPointConfig::default(),
            cluster_tol: None,
            samples: 11,
            count_points: 101,
            dim: 5,
            max_draws: 100_000,
            threshold: 0.0,
            lambda_ratio: 50.0,
            coupling: 0.1,
            gap_count: 20,
            kernel_control: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { directory: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json] }
    }
}

/// Optional pass/fail bounds declared by the experiment.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    pub max_sup_error: Option<f64>,
    /// `[target, tolerance]` for a fitted log-log slope.
    pub slope: Option<[f64; 2]>,
    pub control_max_slope: Option<f64>,
    pub max_norm_drift: Option<f64>,
    pub min_gap_exponent: Option<f64>,
    pub min_r2: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Only the discriminant search draws random numbers.
    pub seed: Option<u64>,
    pub model: ModelBlock,
    #[serde(default)]
    pub numeric: NumericBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub checks: Checks,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let mut params = serde_json::to_value(&self.model.params).map_err(|e| invalid(e.to_string()))?;
        let obj = params.as_object_mut().ok_or_else(|| invalid("model params must be a table"))?;
        obj.insert("name".into(), serde_json::Value::String(self.model.name.clone()));
        serde_json::from_value(params).map_err(|e| invalid(format!("model `{}`: {e}", self.model.name)))
    }

    pub fn t_range(&self) -> (f64, f64) {
        (self.numeric.t_range[0], self.numeric.t_range[1])
    }

    pub fn integrator(&self, epsilon: f64) -> IntegratorConfig {
        let n = &self.numeric;
        IntegratorConfig {
            epsilon,
            dt_factor: n.dt_factor,
            midpoint_fixed_point_tol: n.midpoint_fixed_point_tol,
            midpoint_max_iters: n.midpoint_max_iters,
            norm_renormalize: false,
            midpoint: n.midpoint,
            scheme: n.scheme,
        }
    }

    pub fn epsilon(&self) -> CliResult<f64> {
        self.numeric.epsilon.ok_or_else(|| invalid(format!("{} needs numeric.epsilon", self.kind.as_str())))
    }

    pub fn epsilons(&self) -> CliResult<&[f64]> {
        self.numeric.epsilons.as_deref().ok_or_else(|| invalid(format!("{} needs numeric.epsilons", self.kind.as_str())))
    }

    pub fn writes(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }

    fn validate(&self) -> CliResult<()> {
        let n = &self.numeric;
        let [a, b] = n.t_range;
        if !(a.is_finite() && b.is_finite()) || a == b {
            return Err(invalid(format!("t_range [{a}, {b}] is empty")));
        }
        if let Some(e) = n.epsilon {
            if !(e > 0.0) {
                return Err(invalid(format!("epsilon must be positive, got {e}")));
            }
        }
        if let Some(list) = &n.epsilons {
            if list.is_empty() || list.iter().any(|e| !(*e > 0.0)) {
                return Err(invalid("epsilons must be a nonempty list of positive numbers"));
            }
            if list.windows(2).any(|w| w[1] >= w[0]) {
                return Err(invalid("epsilons must be strictly decreasing"));
            }
        }
        if let (Some(re), Some(im)) = (&n.initial_state, &n.initial_state_imag) {
            if re.len() != im.len() {
                return Err(invalid("initial_state and initial_state_imag differ in length"));
            }
        }
        match self.kind {
            ExperimentKind::Simulate => {
                self.epsilon()?;
                if n.initial_state.is_none() {
                    return Err(invalid("simulate needs numeric.initial_state"));
                }
            }
            ExperimentKind::Sweep | ExperimentKind::Transport => {
                self.epsilons()?;
            }
            ExperimentKind::AnharmonicGaps if self.model.name != "truncated_anharmonic" => {
                return Err(invalid("anharmonic-gaps needs the truncated_anharmonic model"));
            }
            _ => {}
        }
        for eps in n.epsilon.iter().chain(n.epsilons.iter().flatten()) {
            self.integrator(*eps).validate().map_err(|e| invalid(e.to_string()))?;
        }
        n.path.validate().map_err(|e| invalid(e.to_string()))?;
        if n.samples == 0 || n.count_points < 2 || n.dim < 3 || n.max_draws == 0 || n.gap_count < 2 {
            return Err(invalid("samples ≥ 1, count_points ≥ 2, dim ≥ 3, max_draws ≥ 1 and gap_count ≥ 2 are required"));
        }
        self.model_config()?;
        Ok(())
    }
}
