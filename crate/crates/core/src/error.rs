use thiserror::Error;

/// Errors raised by the filtering, twisting and sampling routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite even after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("log-sum-exp of an all -inf vector")]
    AllNegInf,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular measurement geometry: distance {distance:e} to station {station}")]
    SingularGeometry { station: usize, distance: f64 },

    #[error("model is not linear: {0}")]
    NonLinearModel(String),

    #[error("all resampling weights are zero")]
    DegenerateWeights,

    #[error("particle system degenerated at step {step}")]
    ParticleDegeneracy { step: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("sequence has zero variance")]
    ZeroVariance,

    #[error("likelihood estimator failed: {0}")]
    EstimatorFailure(String),

    #[error("dataset error: {0}")]
    Dataset(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
