use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Audit(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<nbody_geodesics::Error> for CliError {
    fn from(e: nbody_geodesics::Error) -> Self {
        use nbody_geodesics::Error as E;
        match e {
            E::Dimension { .. } | E::InvalidInput(_) | E::CollisionSingularity { .. } => CliError::Validation(e.to_string()),
            E::Bracket(_) | E::CalibrationFailure(_) | E::NonConvergent { .. } => CliError::Convergence(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
