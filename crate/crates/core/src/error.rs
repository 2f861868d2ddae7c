use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Every state assigns zero (or non-finite) mass to the observation.
    #[error("degenerate likelihood at t = {t}")]
    DegenerateLikelihood { t: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("segmentation produced {found} segments, need at least {needed}")]
    InsufficientSegments { found: usize, needed: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sampler failure: {0}")]
    SamplerFailure(String),

    #[error("bridge sampling failure: {0}")]
    BridgeFailure(String),

    #[error("spline fit failed: knot span {span} ({lo:.6}, {hi:.6}) contains no samples")]
    EmptyKnotSpan { span: usize, lo: f64, hi: f64 },

    #[error("spline fit failed: {0}")]
    SplineFit(String),

    #[error("spline is identically zero (max |G| = {0:e})")]
    DegenerateSpline(f64),

    #[error("timestamp {0} is outside the trading session")]
    OutOfSession(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: timestamp not after previous tick")]
    NonMonotone { line: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
