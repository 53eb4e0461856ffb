use thiserror::Error;

/// Errors surfaced by the numerical routines.
#[derive(Debug, Error)]
pub enum GeoError {
    #[error("point outside chart domain: {0}")]
    Domain(String),
    #[error("parallel frame drifted by {0:.3e}")]
    FrameDrift(f64),
    #[error("integration failed: {0}")]
    Stiffness(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GeoError {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            GeoError::Config(_) | GeoError::Io(_) | GeoError::Csv(_) => 2,
            GeoError::Invariant(_) => 1,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, GeoError>;
