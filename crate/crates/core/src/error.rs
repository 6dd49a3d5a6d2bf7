use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value for {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },

    #[error("{what} = {value} is outside its domain {domain}")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{matrix} is not positive definite (Cholesky failed)")]
    NotPositiveDefinite { matrix: &'static str },

    #[error("every hypothesis underflowed for slot {slot}")]
    Underflow { slot: usize },

    #[error("every grid value underflowed for slot {slot}, sensor {sensor}")]
    GridUnderflow { slot: usize, sensor: usize },

    #[error("variance regression is degenerate: only {supported} active-count values carry posterior mass")]
    DegenerateRegression { supported: usize },

    #[error("non-finite likelihood at iteration {iteration}")]
    NonFiniteLikelihood { iteration: usize },

    #[error("exact oracle supports at most {max} sensors, got {got}")]
    TooManySensors { max: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn ensure_finite(what: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { what, value })
    }
}

pub(crate) fn ensure_positive(what: &'static str, value: f64) -> Result<f64> {
    ensure_finite(what, value)?;
    if value > 0.0 {
        Ok(value)
    } else {
        Err(Error::OutOfDomain {
            what,
            value,
            domain: "(0, inf)",
        })
    }
}

pub(crate) fn ensure_open_unit(what: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(Error::OutOfDomain {
            what,
            value,
            domain: "(0, 1)",
        })
    }
}
