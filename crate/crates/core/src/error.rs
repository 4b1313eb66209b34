use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rotation matrix is not orthogonal (max |RᵀR - I| = {deviation:e})")]
    InvalidRotation { deviation: f64 },

    #[error("matrix is a reflection (det = {det})")]
    Reflection { det: f64 },

    #[error("covariance is not symmetric positive definite")]
    InvalidCovariance,

    #[error("spherical harmonics degree {0} is not supported (max 3)")]
    UnsupportedDegree(usize),

    #[error("least-squares system is ill-conditioned (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("underdetermined fit: {points} points for {unknowns} unknowns")]
    Underdetermined { points: usize, unknowns: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
}
