use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("boundary layer {boundary} overlaps trainable layer {lowest_trainable}; recompute from a lower layer")]
    Boundary {
        boundary: usize,
        lowest_trainable: usize,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("selection error: requested {requested} clients from a population of {population}")]
    Selection { requested: usize, population: usize },

    #[error("unknown client {0}")]
    UnknownClient(usize),

    #[error("cache integrity error: {0}")]
    CacheIntegrity(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("decision error: {0}")]
    Decision(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("trace parse error at line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    #[error("invalid config field `{field}`: {reason}")]
    ConfigField { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
