use thiserror::Error;

/// Errors raised by the solvers, the simulator and the config layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} is not positive definite (min eigenvalue {min_eig:e}, threshold {threshold:e})")]
    NotPositiveDefinite {
        what: String,
        min_eig: f64,
        threshold: f64,
    },

    #[error("{name} must be positive, got {value}")]
    NonPositiveScalar { name: String, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} lies outside the horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("time {t} is not a node of the grid")]
    GridMismatch { t: f64 },

    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("{what} lost its invariant at t={t}; refine the time step")]
    StepTooCoarse { what: String, t: f64 },

    #[error("{what} is singular at t={t}")]
    Singular { what: String, t: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("target mean {x_bar} is below the bond growth {bond_growth} of the initial wealth")]
    TargetBelowBondGrowth { x_bar: f64, bond_growth: f64 },

    #[error("degenerate market: discounted second moment ratio {rho} >= 1, no finite multiplier")]
    DegenerateMarket { rho: f64 },

    #[error("non-finite wealth on path {path} at t={t}; reduce the simulation step")]
    NonFinite { path: usize, t: f64 },

    #[error("initial centred wealth z0 is zero; the wealth-based moment estimator is undefined")]
    ZeroInitialZ,

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
