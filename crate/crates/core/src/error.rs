use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("hamiltonian is not hermitian at t={t}: residual {residual:e} exceeds {bound:e}")]
    NonHermitian { t: f64, residual: f64, bound: f64 },
    #[error("parameter point (t={t}, x={x:?}) is outside the model domain")]
    OutOfDomain { t: f64, x: Vec<f64> },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("truncation dimension {n} is below the minimum {min}")]
    TruncationTooSmall { n: usize, min: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("anchor overlap {overlap:e} is too small to re-anchor the eigenvector frame")]
    AnchorDegenerate { overlap: f64 },
    #[error("tracked eigenvalue is not simple at t={t}")]
    SimplicityViolation { t: f64 },
    #[error("fixed-point solver did not converge at t={t} (residual {residual:e})")]
    NoConvergence { t: f64, residual: f64 },
    #[error("iterate left the parameter domain at t={t}")]
    DomainExit { t: f64 },
    #[error("no fold found in the requested range")]
    NoFoldInRange,
    #[error("midpoint inner iteration diverged at t={t}")]
    InnerIterationDiverged { t: f64 },
    #[error("step too large at t={t}: inner iteration needs more than {max_iters} iterations")]
    StepTooLarge { t: f64, max_iters: usize },
    #[error("invalid initial data: {0}")]
    InvalidInitialData(String),
    #[error("derivative unavailable: {0}")]
    DerivativeUnavailable(String),
    #[error("eigenvector {index} is ill-conditioned (condition number {condition:e})")]
    IllConditioned { index: usize, condition: f64 },
    #[error("point is {distance:e} away from the unperturbed spectrum")]
    TooCloseToUnperturbedSpectrum { distance: f64 },
    #[error("operation requires a single nonlinear component, got p={p}")]
    NotScalarNonlinearity { p: usize },
    #[error("kernel cluster gap {gap:e} is too small")]
    GapTooSmall { gap: f64 },
    #[error("AW numerator vanishes at eigenvalue index {k}")]
    NumeratorVanishes { k: usize },
    #[error("constraint violated: {0}")]
    ConstraintViolated(String),
    #[error("projector tracking broken at grid index {k} (best overlap {overlap:.3})")]
    TrackingBroken { k: usize, overlap: f64 },
    #[error("eigenvalue path is not real (|Im| = {imag:e})")]
    NonRealEigenvaluePath { imag: f64 },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("i/o failure: {0}")]
    IoFailure(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::IoFailure(e.to_string())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::IoFailure(e.to_string())
    }
}
