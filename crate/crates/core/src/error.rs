use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} components, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("collision singularity between bodies {i} and {j} (separation {separation:e})")]
    CollisionSingularity { i: usize, j: usize, separation: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("could not bracket a minimum of the free-time action: {0}")]
    Bracket(String),

    #[error("calibration failure: {0}")]
    CalibrationFailure(String),

    /// The Cauchy test on successive Busemann approximations never passed.
    #[error("Busemann sequence did not converge within {} levels", history.len())]
    NonConvergent { history: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
