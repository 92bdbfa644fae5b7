use crate::C64;
use thiserror::Error;

/// Failure modes shared by every module of the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid truncation {0}: need N >= 1")]
    InvalidTruncation(i64),
    #[error("invalid scale exponent {0}: need n >= 0")]
    InvalidScale(i64),
    #[error("field is not mean-free: |mean| = {0:e}")]
    NotMeanFree(f64),
    #[error("Neumann series diverges: measured contraction {contraction:.6}")]
    SeriesDiverges { contraction: f64 },
    #[error("linear solve failed: {0}")]
    SolverFailure(String),
    #[error("direction j must be nonzero")]
    UndefinedDirection,
    #[error("dense operator of order {order} needs {bytes} bytes, cap is {cap}")]
    TooLarge { order: usize, bytes: usize, cap: usize },
    #[error("eigensolver failed after {iterations} iterations: {reason}")]
    EigsFailed { iterations: usize, reason: String },
    #[error("contour node {node} at {mu} lies within {distance:e} of the spectrum")]
    ContourTouchesSpectrum { node: usize, mu: C64, distance: f64 },
    #[error("continuation stalled at eps = {eps} (achieved window {eta}): {reason}")]
    ContinuationStalled { eps: f64, eta: f64, reason: String },
    #[error("projector bound inapplicable: M = {0} >= 1")]
    BoundInapplicable(f64),
    #[error("time stepping blew up at t = {t}")]
    BlowUpDetected { t: f64 },
    #[error("band broken at node {node}: {reason}")]
    BandBroken { node: usize, reason: String },
    #[error("box mass {mass} stays below {target} up to R = {r_max}")]
    NotConcentrated { r_max: f64, mass: f64, target: f64 },
    #[error("catalog infeasible at block (n = {n}, l = {l}): {reason}")]
    CatalogInfeasible { n: usize, l: usize, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
