use thiserror::Error;

#[derive(Debug, Error)]
pub enum MbllError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{what} is not symmetric positive definite")]
    NotPositiveDefinite { what: &'static str },
    #[error("{what} is ill-conditioned (estimated condition number {cond:.3e})")]
    IllConditioned { what: &'static str, cond: f64 },
    #[error("rank deficient design: {0}")]
    RankDeficient(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degrees of freedom {dof} too small: {requirement}")]
    DegreesOfFreedom { dof: f64, requirement: String },
    #[error("instance too large for the dense oracle: {size} > {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("EM diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MbllError>;

pub(crate) fn check_dims(
    context: &'static str,
    expected: (usize, usize),
    got: (usize, usize),
) -> Result<()> {
    if expected != got {
        return Err(MbllError::DimensionMismatch {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        });
    }
    Ok(())
}
