use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{name} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { name: &'static str, asymmetry: f64 },

    #[error("{name} is not positive definite")]
    NotPositiveDefinite { name: &'static str },

    #[error("{name} has negative eigenvalue {eigenvalue:e}")]
    NegativeEigenvalue { name: &'static str, eigenvalue: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("filter diverged at step {step}: innovation covariance condition number {condition:e}")]
    FilterDivergence { step: usize, condition: f64 },

    #[error("smoother failed at step {step}: predicted covariance condition number {condition:e}")]
    SmootherSingular { step: usize, condition: f64 },

    #[error("degenerate sufficient statistics: {0}")]
    DegenerateStats(String),

    #[error("sequence {index}: {source}")]
    Sequence {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("classification under model {model} failed: {source}")]
    Classification {
        model: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("all {attempts} EM restarts failed: {details}")]
    AllRestartsFailed { attempts: usize, details: String },

    #[error("numeric fault at step {step}: {what}")]
    NumericFault { step: usize, what: String },

    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("trial failed during {stage}: {source}")]
    Trial {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn in_sequence(self, index: usize) -> Self {
        Error::Sequence { index, source: Box::new(self) }
    }
}
