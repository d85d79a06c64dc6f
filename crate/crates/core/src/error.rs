use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{what} ({value}) is not divisible by {by}")]
    Divisibility {
        what: String,
        value: usize,
        by: usize,
    },

    #[error("stride must be 1 or 2, got {0}")]
    Stride(usize),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires grad")]
    DetachedLoss,

    #[error("batch norm running statistics are uninitialized")]
    UninitializedStats,

    #[error("tensor contains non-finite values ({0})")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("spec error at line {line}, column {column}: {msg}")]
    Syntax {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("invalid spec: field `{field}`: {msg}")]
    Semantic { field: String, msg: String },

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),

    #[error("operation needs computed values but the tape is in shape-only mode")]
    ShapeOnly,

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
