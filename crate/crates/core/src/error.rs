use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error(
        "linearly dependent basis in channel l={l}: exponents {first} and {second} \
         (normalized overlap {overlap:.3e} from unity)"
    )]
    LinearDependence {
        l: usize,
        first: f64,
        second: f64,
        overlap: f64,
    },

    #[error("non-finite field value {value} at r = {radius}")]
    NonFiniteField { radius: f64, value: f64 },

    #[error("pair normalization Q(beta)^2 - Q(2 beta) is not positive ({0:e})")]
    NonPositivePairNorm(f64),

    #[error("{mode} density requires {required}, got {got} particles per spin channel")]
    ParticleCount {
        mode: &'static str,
        required: &'static str,
        got: usize,
    },

    #[error("permutation oracle is capped at {cap} particles, got {got}")]
    TooManyParticles { cap: usize, got: usize },

    #[error("SCF diverged at iteration {iteration}: residual {residual:e}")]
    Divergence { iteration: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
