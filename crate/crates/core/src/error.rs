use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("point is not on the unit sphere (|z| = {norm})")]
    NotOnSphere { norm: f64 },

    #[error("point lies outside the open ball of radius {radius} (|z| = {norm})")]
    OutsideBall { norm: f64, radius: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("cannot parse weight spec `{spec}`: {reason}")]
    WeightSpec { spec: String, reason: String },

    #[error("non-finite integrand value ({count} samples, first at index {first})")]
    NonFinite { count: u64, first: u64 },

    #[error("Cholesky failed after ridge {ridge:e}: pivot {pivot} is {value:e} (diag range {diag_min:e}..{diag_max:e})")]
    Factorization {
        ridge: f64,
        pivot: usize,
        value: f64,
        diag_min: f64,
        diag_max: f64,
    },

    #[error("fit needs at least {needed} usable points, got {got}")]
    DegenerateFit { needed: usize, got: usize },

    #[error("every grid value diverged; retry with smaller epsilon (first epsilon {first})")]
    AllDivergent { first: f64 },

    #[error("region check failed: {0}")]
    Region(String),

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        name: name.to_string(),
        reason: reason.into(),
    }
}
