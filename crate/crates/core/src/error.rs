use thiserror::Error;

/// Errors raised by validation, right-hand-side evaluation, integration and
/// post-processing.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter `{name}` must be positive, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },

    #[error("dimension mismatch: expected {expected} eigenvalues, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dimension n must be at least 2, got {0}")]
    DimensionTooSmall(usize),

    #[error("non-finite input `{0}`")]
    NonFiniteInput(&'static str),

    #[error("stored multiplicity J={stored} does not match recomputed J={computed}")]
    MultiplicityMismatch { stored: usize, computed: usize },

    #[error("eigenvalues must be sorted ascending")]
    Unsorted,

    #[error("density must stay positive, got {0}")]
    NonPositiveDensity(f64),

    #[error("u_{index} = {value} is not positive")]
    NonPositiveU { index: usize, value: f64 },

    #[error("all initial eigenvalues coincide; use the scalar reduction")]
    DegenerateSpectrum,

    #[error("coordinate system does not apply: {0}")]
    UnsupportedData(&'static str),

    #[error("initial matrix is not diagonalizable with real spectrum")]
    InvalidMatrixSeed,

    #[error("step size underflow at t={t} (h={h})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("non-finite state at t={0}")]
    NonFiniteState(f64),

    #[error("invalid step control: {0}")]
    InvalidControl(&'static str),

    #[error("no zero crossing of u_1 on the trajectory")]
    NoCrossing,

    #[error("no blow-up before t_max={0}")]
    NoBlowupBeforeTmax(f64),

    #[error("lambda_1 turns around near {lambda_1:e}: a near-collision, not a blow-up")]
    NearCollision { lambda_1: f64 },

    #[error("trajectory does not end in a blow-up event")]
    NotABlowupTrajectory,

    #[error("insufficient tail samples: {0}")]
    InsufficientTailSamples(String),

    #[error("ambiguous exponent: residuals {0:?} are within a factor 2")]
    AmbiguousExponent(Vec<(f64, f64)>),

    #[error("case cannot be resolved from the initial data")]
    UnresolvedCase,

    #[error("t={t} lies outside [0, t_B) with t_B={t_b}")]
    OutOfDomain { t: f64, t_b: f64 },

    #[error("invalid family: {0}")]
    InvalidFamily(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
