use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // -- diagram ----------------------------------------------------------
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("invalid range for `{name}`: {message}")]
    InvalidRange { name: String, message: String },
    #[error("lag-0 cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("edge {source_var}->{target}@{lag} exceeds max lag {max_lag}")]
    LagExceedsMax {
        source_var: String,
        target: String,
        lag: usize,
        max_lag: usize,
    },
    #[error("duplicate edge {source_var}->{target}@{lag}")]
    DuplicateEdge {
        source_var: String,
        target: String,
        lag: usize,
    },
    #[error("target `{0}` has no incoming edge")]
    MissingInflow(String),
    #[error("invalid diagram: {0}")]
    InvalidDiagram(String),

    // -- data -------------------------------------------------------------
    #[error("panel error: {0}")]
    Panel(String),
    #[error("missing value for observed variable `{variable}` (participant {participant}, step {step})")]
    MissingObserved {
        variable: String,
        participant: String,
        step: usize,
    },
    #[error("value {value} of `{variable}` out of range (participant {participant}, step {step})")]
    OutOfRange {
        variable: String,
        participant: String,
        step: usize,
        value: f64,
    },

    // -- estimation -------------------------------------------------------
    #[error("non-positive variance for `{0}`")]
    NonPositiveVariance(String),
    #[error("singular innovation covariance at step {0}")]
    SingularInnovation(usize),
    #[error("zero-variance regressor: {}", .0.join(", "))]
    ZeroVarianceRegressor(Vec<String>),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unsupported model structure: {0}")]
    Unsupported(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    // -- search / baselines / reports ------------------------------------
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("eta={eta} yields {count} candidates, above the cap of {cap}; lower --eta")]
    EnumerationCap { eta: usize, count: u128, cap: u128 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Panel(e.to_string())
    }
}
