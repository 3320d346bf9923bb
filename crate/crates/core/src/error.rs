use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("view {view}: non-finite observed value at row {row}, column {col}")]
    NonFinite { view: usize, row: usize, col: usize },

    #[error("view {0} has no observations")]
    EmptyView(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("view {0} does not have feature selection enabled")]
    NoFeatureSelection(usize),

    #[error("view {0} is not an indicator view")]
    NotIndicator(usize),

    #[error("unknown view {0}")]
    UnknownView(usize),

    #[error("sample index {index} out of range (n = {n})")]
    SampleOutOfRange { index: usize, n: usize },

    #[error("matrix is not positive definite after jitter escalation (context: {0})")]
    NotPositiveDefinite(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Data(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate record for ({subject}, {month}, {variable}) on lines {first} and {second}")]
    Duplicate {
        subject: String,
        month: i64,
        variable: String,
        first: usize,
        second: usize,
    },

    #[error("invalid model file: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NotPositiveDefinite(_) | Error::Numerical(_))
    }
}
