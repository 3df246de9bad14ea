use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("target {target} out of range for {classes} classes (row {row})")]
    TargetOutOfRange {
        row: usize,
        target: usize,
        classes: usize,
    },

    #[error("every position is masked; loss is undefined")]
    AllMasked,

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid hyperparameter {name} = {value}")]
    Hyperparameter { name: &'static str, value: f64 },

    #[error("step {step} exceeds schedule length {total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient in parameter {name}; update rejected")]
    NonFiniteGradient { name: String },

    #[error("weight file: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for NumericsError {
    fn from(e: std::io::Error) -> Self {
        NumericsError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, NumericsError>;
