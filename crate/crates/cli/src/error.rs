use adiabatic_lab::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("numerical failure in stage `{stage}`: {source}")]
    NumericalFailure {
        stage: String,
        #[source]
        source: LabError,
    },
    #[error("invariant failure: {}", .0.join(", "))]
    InvariantFailure(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::NumericalFailure { .. } => 3,
            CliError::InvariantFailure(_) => 4,
        }
    }

    /// Configuration problems surfaced by the library stay configuration problems.
    pub fn at_stage(stage: &str, e: LabError) -> Self {
        match e {
            e @ (LabError::ConfigInvalid(_) | LabError::UnknownModel(_)) => CliError::ConfigInvalid(e.to_string()),
            source => CliError::NumericalFailure { stage: stage.to_string(), source },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a stage name to library errors.
pub trait Stage<T> {
    fn stage(self, name: &str) -> CliResult<T>;
}

impl<T> Stage<T> for adiabatic_lab::Result<T> {
    fn stage(self, name: &str) -> CliResult<T> {
        self.map_err(|e| CliError::at_stage(name, e))
    }
}
