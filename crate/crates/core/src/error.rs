use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite or out-of-range input: {0}")]
    NumericInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("points at or behind the camera plane: {indices:?}")]
    BehindCamera { indices: Vec<usize> },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("no visible joints to evaluate")]
    EmptyEvaluation,

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("sample {0} has no label for the requested bucket key")]
    MissingBucket(usize),

    #[error("parameter bank category `{0}` is empty")]
    EmptyCategory(String),

    #[error("bank entry {category}[{index}] ({provenance}) violates angle limits: {detail}")]
    LimitViolation {
        category: String,
        index: usize,
        provenance: String,
        detail: String,
    },

    #[error("sample generation failed after {0} camera draws")]
    GenerationExhausted(usize),

    #[error("insufficient keypoints: {visible} visible body keypoints, need {required}")]
    InsufficientKeypoints { visible: usize, required: usize },

    #[error("part `{0}` is absent from the input")]
    AbsentPart(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("configuration: {0}")]
    Configuration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::NumericInput(_) => "numeric_input",
            Error::Shape(_) => "shape",
            Error::BehindCamera { .. } => "behind_camera",
            Error::Malformed(_) => "malformed_file",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::Version { .. } => "version",
            Error::EmptyEvaluation => "empty_evaluation",
            Error::DegenerateAlignment(_) => "degenerate_alignment",
            Error::MissingBucket(_) => "missing_bucket",
            Error::EmptyCategory(_) => "empty_category",
            Error::LimitViolation { .. } => "limit_violation",
            Error::GenerationExhausted(_) => "generation_exhausted",
            Error::InsufficientKeypoints { .. } => "insufficient_keypoints",
            Error::AbsentPart(_) => "absent_part",
            Error::Divergence(_) => "training_divergence",
            Error::Configuration(_) => "configuration",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
