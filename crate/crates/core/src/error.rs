use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquareInput { rows: usize, cols: usize },

    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },

    #[error("non-finite rate at ({row}, {col})")]
    NonFiniteRate { row: usize, col: usize },

    #[error("matrix exponential row {row} deviates from stochastic by {deviation:e}")]
    ExpmInaccuracy { row: usize, deviation: f64 },

    #[error("interval must be finite and non-negative, got {0}")]
    InvalidInterval(f64),

    #[error("interval must be strictly positive, got {0}")]
    NonPositiveInterval(f64),

    #[error("unknown feature {0}")]
    UnknownFeature(String),

    #[error("structure mask is not a left-to-right chain")]
    StructureNotChain,

    #[error("query time {query} precedes the end of the observed prefix at {prefix_end}")]
    NonCausalQuery { query: f64, prefix_end: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("state {state} has degenerate expected occupancy")]
    DegenerateOccupancy { state: usize },

    #[error("{patients} patients cannot populate {subtypes} subtypes")]
    TooFewPatients { patients: usize, subtypes: usize },

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("trajectory {0} has no held-out observations to score")]
    NoHeldOutObservations(String),

    #[error("invalid trajectory {id}: {reason}")]
    InvalidTrajectory { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("patient {patient} has more than one record at time {time}")]
    DuplicateTimestamp { patient: String, time: f64 },

    #[error("column {0} is not present in the data header")]
    UnknownColumn(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-parseable name of the error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::NonSquareInput { .. } => "NonSquareInput",
            Error::NegativeOffDiagonal { .. } => "NegativeOffDiagonal",
            Error::NonFiniteRate { .. } => "NonFiniteRate",
            Error::ExpmInaccuracy { .. } => "ExpmInaccuracy",
            Error::InvalidInterval(_) => "InvalidInterval",
            Error::NonPositiveInterval(_) => "NonPositiveInterval",
            Error::UnknownFeature(_) => "UnknownFeature",
            Error::StructureNotChain => "StructureNotChain",
            Error::NonCausalQuery { .. } => "NonCausalQuery",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::DegenerateOccupancy { .. } => "DegenerateOccupancy",
            Error::TooFewPatients { .. } => "TooFewPatients",
            Error::EmptyCohort => "EmptyCohort",
            Error::NoHeldOutObservations(_) => "NoHeldOutObservations",
            Error::InvalidTrajectory { .. } => "InvalidTrajectory",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Parse { .. } => "ParseError",
            Error::DuplicateTimestamp { .. } => "DuplicateTimestamp",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::Io(_) => "IoError",
            Error::Json(_) => "ParseError",
        }
    }
}
