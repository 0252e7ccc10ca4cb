use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no subjects")]
    NoSubjects,
    #[error("variance undefined: need at least 2 subjects, got {0}")]
    VarianceUndefined(usize),
    #[error("validation error at row {row}, field `{field}`: {message}")]
    Validation { row: usize, field: String, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("uncalibrated DGM {0}: beta0 is not set")]
    UncalibratedDgm(u8),
    #[error("calibration failed for DGM {0}: no sign change within [-1000, 1000]")]
    CalibrationFailed(u8),
    #[error("insufficient stratum size in trial {trial}: need {needed}, have {available}")]
    InsufficientStratum {
        trial: String,
        needed: usize,
        available: usize,
    },
    #[error("singular fit: information matrix is not positive definite")]
    SingularFit,
    #[error("non-finite linear predictor for subjects {0:?}")]
    NonFinitePredictor(Vec<usize>),
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("degenerate arm weight for arm {0}")]
    DegenerateArmWeight(String),
    #[error("missing arm {0}")]
    MissingArm(String),
    #[error("missing variance for arm {0}")]
    MissingArmVariance(String),
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("covariate `{name}` not found; available: {available:?}")]
    MissingCovariate { name: String, available: Vec<String> },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// True for failures caused by reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_)) || matches!(self, Error::Csv(e) if e.is_io_error())
    }
}
