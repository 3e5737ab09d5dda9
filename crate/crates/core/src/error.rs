use thiserror::Error;

/// Every failure the engine can report. Each variant names the module that
/// raised it so command-line messages can point at the violated precondition.
#[derive(Debug, Error)]
pub enum Error {
    #[error("multiindex: {0}")]
    InvalidIndex(String),

    #[error("frequency: zero multi-index has no small-divisor bound")]
    ZeroIndex,

    #[error("frequency: index support reaches position {position} but max_dim is {max_dim}")]
    SupportOutOfRange { position: u32, max_dim: usize },

    #[error("frequency: no admissible sample after {attempts} attempts ({what}); the Diophantine constant is too large for this lattice")]
    ExhaustedAttempts { what: &'static str, attempts: usize },

    #[error("frequency: interval [{a}, {b}] is too small for gamma = {gamma} (need b - a > 4*pi*gamma)")]
    IntervalTooSmall { a: f64, b: f64, gamma: f64 },

    #[error("apseries: operands were built over different frequency contexts")]
    ContextMismatch,

    #[error("apseries: composition domain violated: ||u|| + ||v|| = {size:e} must be below {limit:e}")]
    CompositionDomain { size: f64, limit: f64 },

    #[error("{module}: contraction failed: {detail}")]
    ContractionFailure { module: &'static str, detail: String },

    #[error("homological: right-hand side has nonzero mean (|mean| = {mean:e}); the difference equation is unsolvable")]
    MeanNotZero { mean: f64 },

    #[error("{module}: small divisor {divisor:e} below floor {floor:e} at index {index}")]
    SmallDivisorBreakdown {
        module: &'static str,
        index: String,
        divisor: f64,
        floor: f64,
    },

    #[error("{module}: self-check failed: residual {residual:e} exceeds {tol:e}")]
    ResidualCheck {
        module: &'static str,
        residual: f64,
        tol: f64,
    },

    #[error("homological: index {0} lies outside the verified lattice")]
    UnverifiedIndex(String),

    #[error("twistmap: image abscissa is not monotone near x = {x} (derivative {derivative:e}); perturbation too large to reparametrize")]
    ReparametrizationFailure { x: f64, derivative: f64 },

    #[error("kam: condition {condition} violated: {lhs:e} !< {rhs:e}")]
    ConditionViolation {
        condition: String,
        lhs: f64,
        rhs: f64,
    },

    #[error("kam: no convergence after {stages} stages: {reason} (last residual {residual:e}, tolerance {tol:e})")]
    NoConvergence {
        stages: usize,
        residual: f64,
        tol: f64,
        reason: String,
        /// Residual after each completed stage.
        residuals: Vec<f64>,
    },

    #[error("pendulum: step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },

    #[error("pendulum: large-energy chart breaks down: {0}")]
    ChartBreakdown(String),

    #[error("{module}: invalid input: {detail}")]
    InvalidInput { module: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(module: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidInput {
            module,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidIndex(_)
                | Error::ZeroIndex
                | Error::SupportOutOfRange { .. }
                | Error::IntervalTooSmall { .. }
                | Error::ContextMismatch
                | Error::UnverifiedIndex(_)
                | Error::MeanNotZero { .. }
                | Error::InvalidInput { .. }
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
