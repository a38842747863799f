use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    OutOfVocab { id: usize, vocab_size: usize },

    #[error("context {0:?} is not in the model's context table")]
    UnknownContext(String),

    #[error("model is frozen")]
    FrozenModel,

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown feature builtin {0:?}")]
    UnknownFeature(String),

    #[error("feature {feature:?} returned {value} on sample {sample}: {reason}")]
    FeatureValue {
        feature: String,
        sample: usize,
        value: f64,
        reason: &'static str,
    },

    #[error("infeasible constraint: {0}")]
    Infeasible(String),

    #[error("lambda fit did not converge after {iterations} iterations (moment gap {gap:.4} > tolerance {tolerance})")]
    NotConverged {
        iterations: usize,
        gap: f64,
        tolerance: f64,
    },

    #[error("importance weights starved: {0}")]
    Starvation(String),

    #[error("numerical abort at step {step}: {detail}")]
    NumericalAbort { step: usize, detail: String },

    #[error("sequence space has {size} elements, above the enumeration limit {limit}")]
    SpaceTooLarge { size: u128, limit: u128 },

    #[error("logging failed at step {step}: {source}")]
    Logging {
        step: usize,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
