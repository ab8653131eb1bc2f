use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label {label:?} for feature {feature}")]
    UnknownLabel { feature: String, label: String },

    #[error("feature {0} is not categorical")]
    NotCategorical(String),

    #[error("unknown feature {0}")]
    UnknownFeature(String),

    #[error("six-month follow-up score is missing")]
    MissingFollowUp,

    #[error("score {0} outside [0, 110]")]
    ScoreOutOfRange(f64),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("duplicate case id {0}")]
    DuplicateId(String),

    #[error("invalid schema file: {0}")]
    InvalidSchema(String),

    #[error("degenerate class: {0}")]
    DegenerateClass(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("no convergence after {0} passes")]
    NoConvergence(usize),

    #[error("weight vector has {weights} entries for {members} members")]
    WeightMismatch { weights: usize, members: usize },

    #[error("degenerate fold: {0}")]
    DegenerateFold(String),

    #[error("sampling budget {budget} below minimum {minimum}")]
    BudgetTooSmall { budget: usize, minimum: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("need at least {needed} cases, got {got}")]
    TooFewCases { needed: usize, got: usize },

    #[error("rater {rater} has no call for case {case}")]
    IncompleteCoverage { rater: String, case: String },

    #[error("confidence {0} outside 1..=5")]
    MalformedConfidence(i64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownLabel { .. } => "UnknownLabel",
            Error::NotCategorical(_) => "NotCategorical",
            Error::UnknownFeature(_) => "UnknownFeature",
            Error::MissingFollowUp => "MissingFollowUp",
            Error::ScoreOutOfRange(_) => "ScoreOutOfRange",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::DuplicateId(_) => "DuplicateId",
            Error::InvalidSchema(_) => "InvalidSchema",
            Error::DegenerateClass(_) => "DegenerateClass",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::NoConvergence(_) => "NoConvergence",
            Error::WeightMismatch { .. } => "WeightMismatch",
            Error::DegenerateFold(_) => "DegenerateFold",
            Error::BudgetTooSmall { .. } => "BudgetTooSmall",
            Error::DegenerateData(_) => "DegenerateData",
            Error::TooFewCases { .. } => "TooFewCases",
            Error::IncompleteCoverage { .. } => "IncompleteCoverage",
            Error::MalformedConfidence(_) => "MalformedConfidence",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ModelFile(_) => "ModelFile",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
