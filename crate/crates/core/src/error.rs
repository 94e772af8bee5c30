use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("variable sets differ ({left} vs {right} variables)")]
    VariableMismatch { left: usize, right: usize },
    #[error("parse error at offset {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expression is not affine in the decision variables: {0}")]
    NonAffine(String),
    #[error("constraint `{name}` has odd degree {degree} and cannot be SOS")]
    OddDegree { name: String, degree: u32 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("degenerate ellipsoid: minimum eigenvalue {min_eig:e}")]
    DegenerateEllipsoid { min_eig: f64 },
    #[error("class-K-infinity gate failed: {0}")]
    ClassKInf(String),
    #[error("certificate extraction failed: {0}")]
    Certificate(String),
    #[error("trajectory diverged at t = {t}")]
    Divergence { t: f64 },
    #[error("event storm: {count} consecutive events ending at t = {t}")]
    EventStorm { t: f64, count: usize },
    #[error("verification failed: {0}")]
    Verification(String),
}
