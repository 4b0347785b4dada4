use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} does not match data length {len}")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("row {row} has no unmasked entry or a zero normalizer")]
    DegenerateRow { row: usize },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("routing table inconsistent with inputs: {0}")]
    Routing(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("pipeline invariant violated: {0}")]
    Pipeline(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("context of {len} tokens exceeds configured maximum {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (layer {layer:?}): {statistic}")]
    NonFiniteLoss {
        step: usize,
        layer: Option<usize>,
        statistic: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
