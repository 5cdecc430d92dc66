use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("neuron-level pruning requires at least one hidden layer")]
    NoHiddenLayer,

    #[error("maskable set is invalid: {0}")]
    Maskable(String),

    #[error("ranking has {0} units; quartile segmentation needs at least 4")]
    RankingTooShort(usize),

    #[error("pruning policy keeps no segments")]
    EmptyPolicy,

    #[error("invalid codename {codename:?}: {reason}")]
    Codename { codename: String, reason: String },

    #[error("{path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("infeasible partition: {0}")]
    Partition(String),

    #[error("inconsistent region partition: {0}")]
    Partitioning(String),

    #[error("round {round}: {uncovered} parameters are not covered by any participating client")]
    Coverage { round: u32, uncovered: usize },

    #[error("non-finite parameters after {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("client weights sum to {0}, expected 1")]
    Weights(f64),

    #[error("invalid theory constants: {0}")]
    Theory(String),

    #[error("malformed metrics record: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
