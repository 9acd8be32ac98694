use thiserror::Error;

/// Errors raised across the lab.
///
/// The CLI maps these onto exit codes: configuration problems exit with 2,
/// solver failures with 3.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("empty domain: {0}")]
    EmptyDomain(String),
    #[error("invalid domain descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("point {point:?} is not in the domain")]
    PointOutsideDomain { point: Vec<i64> },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("domain too large: {size} points exceeds limit {limit}")]
    DomainTooLarge { size: usize, limit: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            LabError::NonConvergence { .. } | LabError::Factorization(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
