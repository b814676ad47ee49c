use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("feature `{feature}`: id {id} out of range for cardinality {cardinality}")]
    Lookup {
        feature: String,
        id: u32,
        cardinality: usize,
    },

    #[error("{what} must be divisible by {by} (got {value})")]
    Divisibility {
        what: &'static str,
        value: usize,
        by: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward: {0}")]
    Backward(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at step {step}; layer activation norms {layer_norms:?}")]
    Diverged { step: usize, layer_norms: Vec<f64> },

    #[error("unknown ablation toggle `{0}`")]
    UnknownToggle(String),

    #[error("layout mismatch: {0}")]
    Layout(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
