use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes, so new
/// variants need a home in that mapping.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values or an unparsable config file.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset content.
    #[error("data error: {0}")]
    Data(String),

    /// Feature plan parse or validation failure.
    #[error("feature plan error: {0}")]
    Plan(String),

    /// Attack component outside its admissible domain.
    #[error("attack domain error: {0}")]
    Domain(String),

    /// Model building, persistence, or layout mismatch.
    #[error("model error: {0}")]
    Model(String),

    /// Estimator construction or application failure.
    #[error("estimator error: {0}")]
    Estimator(String),

    /// Metric computation over degenerate inputs.
    #[error("metric error: {0}")]
    Metric(String),

    /// A pipeline stage was invoked before the artifacts it consumes exist.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
